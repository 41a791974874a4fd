use serde::{Deserialize, Serialize};

use crate::DatagenError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Stable,
    Unstable,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Stable => "stable",
            Label::Unstable => "unstable",
        }
    }
}

/// Binary entropy in bits of a `stable / total` split.
pub fn binary_entropy(stable: usize, total: usize) -> f64 {
    if total == 0 || stable == 0 || stable == total {
        return 0.0;
    }
    let p = stable as f64 / total as f64;
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

pub fn entropy(labels: &[Label]) -> Result<f64, DatagenError> {
    if labels.is_empty() {
        return Err(DatagenError::EmptyLabels);
    }
    let stable = labels.iter().filter(|&&l| l == Label::Stable).count();
    Ok(binary_entropy(stable, labels.len()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub dim: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Gains closer than this are treated as equal.
const GAIN_TIE: f64 = 1e-12;

/// Best single-threshold stump on one coordinate. Candidate thresholds are
/// midpoints between consecutive distinct sorted values.
pub fn best_threshold(points: &[Vec<f64>], labels: &[Label], dim: usize) -> Option<(f64, f64)> {
    let n = points.len();
    let total_stable = labels.iter().filter(|&&l| l == Label::Stable).count();
    let parent = binary_entropy(total_stable, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| points[a][dim].total_cmp(&points[b][dim]));

    let mut best: Option<(f64, f64)> = None;
    let mut left_stable = 0;
    for i in 0..n.saturating_sub(1) {
        if labels[order[i]] == Label::Stable {
            left_stable += 1;
        }
        let (a, b) = (points[order[i]][dim], points[order[i + 1]][dim]);
        if a == b {
            continue;
        }
        let nl = i + 1;
        let nr = n - nl;
        let child = (nl as f64 * binary_entropy(left_stable, nl)
            + nr as f64 * binary_entropy(total_stable - left_stable, nr))
            / n as f64;
        let gain = parent - child;
        if best.is_none_or(|(_, g)| gain > g + GAIN_TIE) {
            best = Some((0.5 * (a + b), gain));
        }
    }
    best
}

/// Picks the coordinate whose best stump has the highest information gain,
/// lowest index on ties. `None` when the labels are pure or there are fewer
/// than two points, meaning the region should not be split on label grounds.
pub fn select_split_dimension(points: &[Vec<f64>], labels: &[Label]) -> Option<Split> {
    assert_eq!(points.len(), labels.len());
    if points.len() < 2 || labels.iter().all(|&l| l == labels[0]) {
        return None;
    }
    let dims = points[0].len();
    let mut best: Option<Split> = None;
    for dim in 0..dims {
        let (threshold, gain) = best_threshold(points, labels, dim).unwrap_or((points[0][dim], 0.0));
        if best.is_none_or(|b| gain > b.gain + GAIN_TIE) {
            best = Some(Split { dim, threshold, gain });
        }
    }
    best
}
