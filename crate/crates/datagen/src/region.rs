use serde::{Deserialize, Serialize};

/// Regions are numbered as a complete `B`-ary heap: the root is 0 and the
/// `c`-th child of region `p` is `p * B + c + 1`. Ids are therefore stable
/// whatever order regions are evaluated in.
pub type RegionId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: RegionId,
    pub bounds: Vec<(f64, f64)>,
    pub depth: u32,
    pub parent: Option<RegionId>,
}

impl Region {
    pub fn root(bounds: Vec<(f64, f64)>) -> Self {
        Self {
            id: 0,
            bounds,
            depth: 0,
            parent: None,
        }
    }

    pub fn dims(&self) -> usize {
        self.bounds.len()
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|(lo, hi)| hi - lo).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims() && self.bounds.iter().zip(x).all(|(&(lo, hi), &v)| lo <= v && v <= hi)
    }
}

/// Cuts `bounds[dim]` into `branch` equal-width intervals. The outer edges
/// are copied from the parent so the children cover it exactly.
pub fn subdivide(region: &Region, dim: usize, branch: usize) -> Vec<Region> {
    assert!(branch >= 2, "branch factor must be at least 2");
    assert!(dim < region.dims(), "split dimension {dim} out of range");
    let (lo, hi) = region.bounds[dim];
    let edge = |i: usize| match i {
        0 => lo,
        i if i == branch => hi,
        i => lo + (hi - lo) * i as f64 / branch as f64,
    };
    (0..branch)
        .map(|c| {
            let mut bounds = region.bounds.clone();
            bounds[dim] = (edge(c), edge(c + 1));
            Region {
                id: region.id * branch as u64 + c as u64 + 1,
                bounds,
                depth: region.depth + 1,
                parent: Some(region.id),
            }
        })
        .collect()
}
