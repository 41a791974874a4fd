use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::oracle::StabilityOracle;
use crate::region::{subdivide, Region, RegionId};
use crate::split::{entropy, select_split_dimension, Label};
use crate::DatagenError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expansion {
    /// Every region above the depth limit is subdivided.
    Full,
    /// Only regions whose label entropy exceeds the threshold are subdivided.
    MarginOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Uniform,
    /// Latin hypercube: one point per stratum in every coordinate.
    Lhs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub bounds: Vec<(f64, f64)>,
    pub depth: u32,
    pub branch: usize,
    pub points: usize,
    pub entropy_threshold: f64,
    pub seed: u64,
    pub expansion: Expansion,
    pub sampler: Sampler,
}

impl ExplorationConfig {
    /// Unit hypercube, full expansion, uniform sampling.
    pub fn unit(dims: usize, depth: u32, branch: usize, points: usize) -> Self {
        Self {
            bounds: vec![(0.0, 1.0); dims],
            depth,
            branch,
            points,
            entropy_threshold: 0.5,
            seed: 0,
            expansion: Expansion::Full,
            sampler: Sampler::Uniform,
        }
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::Config(m));
        if self.bounds.is_empty() {
            return bad("at least one dimension is required".into());
        }
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("dimension {i}: bounds [{lo}, {hi}] are degenerate"));
            }
        }
        if self.branch < 2 {
            return bad(format!("branch factor {} < 2", self.branch));
        }
        if self.points == 0 {
            return bad("points per region must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.entropy_threshold) {
            return bad(format!("entropy threshold {} outside [0, 1]", self.entropy_threshold));
        }
        if max_region_id(self.branch, self.depth).is_none() {
            return bad(format!("branch {} and depth {} overflow region ids", self.branch, self.depth));
        }
        Ok(())
    }
}

fn max_region_id(branch: usize, depth: u32) -> Option<u64> {
    let b = branch as u64;
    (0..depth).try_fold(0u64, |id, _| id.checked_mul(b)?.checked_add(b))
}

/// `P · Σ_{d=0..D} B^d`, the task count under full expansion.
pub fn full_task_count(points: usize, branch: usize, depth: u32) -> u64 {
    let mut regions = 0u64;
    let mut level = 1u64;
    for _ in 0..=depth {
        regions += level;
        level *= branch as u64;
    }
    points as u64 * regions
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub point: Vec<f64>,
    pub label: Label,
    pub region: RegionId,
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub dims: usize,
    pub records: Vec<Record>,
}

impl LabeledDataset {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DatagenError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dims).map(|i| format!("x{i}")).collect();
        header.extend(["label", "region", "depth"].map(String::from));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = r.point.iter().map(f64::to_string).collect();
            row.push(r.label.as_str().into());
            row.push(r.region.to_string());
            row.push(r.depth.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        buf
    }

    pub fn stable_fraction(&self) -> f64 {
        let stable = self.records.iter().filter(|r| r.label == Label::Stable).count();
        stable as f64 / self.records.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub depth: u32,
    pub regions: usize,
    pub tasks: usize,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub tasks: usize,
    pub regions: usize,
    pub workers: usize,
    pub makespan_s: f64,
    pub mean_task_s: f64,
    pub task_cost: String,
    pub levels: Vec<LevelMetrics>,
}

fn sample_points(region: &Region, config: &ExplorationConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(region.id);
    let p = config.points;
    match config.sampler {
        Sampler::Uniform => (0..p)
            .map(|_| region.bounds.iter().map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect())
            .collect(),
        Sampler::Lhs => {
            let mut pts = vec![Vec::with_capacity(region.dims()); p];
            for &(lo, hi) in &region.bounds {
                let mut strata: Vec<usize> = (0..p).collect();
                strata.shuffle(&mut rng);
                for (pt, s) in pts.iter_mut().zip(strata) {
                    pt.push(lo + (hi - lo) * (s as f64 + rng.random::<f64>()) / p as f64);
                }
            }
            pts
        }
    }
}

/// Dimension with the largest width relative to the root, lowest index on
/// ties. Used to keep subdividing regions whose labels give no split signal.
fn widest_dimension(region: &Region, root: &[(f64, f64)]) -> usize {
    let mut best = 0;
    let mut best_w = f64::NEG_INFINITY;
    for (i, (&(lo, hi), &(rlo, rhi))) in region.bounds.iter().zip(root).enumerate() {
        let w = (hi - lo) / (rhi - rlo);
        if w > best_w * (1.0 + 1e-12) {
            best = i;
            best_w = w;
        }
    }
    best
}

/// Level-by-level exploration. Each level is one wave: all its points are
/// sampled, then every oracle evaluation runs as an independent task on a
/// pool of `workers` threads, then the coordinator decides which regions
/// to subdivide. Records are ordered by region id and point index, so the
/// dataset does not depend on the worker count.
pub fn explore(
    config: &ExplorationConfig,
    oracle: &StabilityOracle,
    workers: usize,
) -> Result<(LabeledDataset, RunMetrics), DatagenError> {
    config.validate()?;
    if workers == 0 {
        return Err(DatagenError::Config("workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .thread_name(|i| format!("oracle-{i}"))
        .build()
        .map_err(|e| DatagenError::Pool(e.to_string()))?;

    let mut dataset = LabeledDataset {
        dims: config.bounds.len(),
        records: Vec::new(),
    };
    let mut levels = Vec::new();
    let mut busy = Duration::ZERO;
    let started = Instant::now();
    let mut wave = vec![Region::root(config.bounds.clone())];
    let mut regions = 0;

    while !wave.is_empty() {
        let level_start = Instant::now();
        let depth = wave[0].depth;
        let samples: Vec<Vec<Vec<f64>>> = wave.iter().map(|r| sample_points(r, config)).collect();
        let tasks: Vec<(usize, usize)> = samples
            .iter()
            .enumerate()
            .flat_map(|(r, pts)| (0..pts.len()).map(move |i| (r, i)))
            .collect();
        let results: Vec<(Label, Duration)> = pool.install(|| {
            tasks
                .par_iter()
                .with_max_len(1)
                .map(|&(r, i)| {
                    let t = Instant::now();
                    let label = oracle.evaluate(&samples[r][i]);
                    (label, t.elapsed())
                })
                .collect()
        });
        busy += results.iter().map(|(_, d)| *d).sum::<Duration>();

        let mut next = Vec::new();
        let mut results = results.into_iter();
        for (region, points) in wave.iter().zip(samples) {
            let labels: Vec<Label> = results.by_ref().take(points.len()).map(|(l, _)| l).collect();
            let split = depth < config.depth
                && match config.expansion {
                    Expansion::Full => true,
                    Expansion::MarginOnly => entropy(&labels)? > config.entropy_threshold,
                };
            if split {
                let dim = select_split_dimension(&points, &labels)
                    .map_or_else(|| widest_dimension(region, &config.bounds), |s| s.dim);
                next.extend(subdivide(region, dim, config.branch));
            }
            dataset.records.extend(points.into_iter().zip(labels).map(|(point, label)| Record {
                point,
                label,
                region: region.id,
                depth,
            }));
        }
        levels.push(LevelMetrics {
            depth,
            regions: wave.len(),
            tasks: tasks.len(),
            wall_s: level_start.elapsed().as_secs_f64(),
        });
        regions += wave.len();
        next.sort_by_key(|r| r.id);
        wave = next;
    }

    let tasks = dataset.records.len();
    let metrics = RunMetrics {
        tasks,
        regions,
        workers,
        makespan_s: started.elapsed().as_secs_f64(),
        mean_task_s: busy.as_secs_f64() / tasks.max(1) as f64,
        task_cost: oracle.cost().describe(),
        levels,
    };
    Ok((dataset, metrics))
}

/// Writes `dataset.csv` and a `metrics.json` sidecar holding the
/// configuration and run metrics.
pub fn write_outputs(
    dir: &Path,
    config: &ExplorationConfig,
    dataset: &LabeledDataset,
    metrics: &RunMetrics,
) -> Result<(), DatagenError> {
    fs::create_dir_all(dir)?;
    dataset.write_csv(fs::File::create(dir.join("dataset.csv"))?)?;
    let sidecar = serde_json::json!({
        "config": config,
        "metrics": metrics,
        "stable_fraction": dataset.stable_fraction(),
    });
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}
