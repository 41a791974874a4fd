use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::explore::{explore, ExplorationConfig};
use crate::oracle::StabilityOracle;
use crate::DatagenError;

pub const CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub workers: usize,
    pub times_s: Vec<f64>,
    pub mean_s: f64,
    /// Student-t half-width of the mean; `None` with a single repeat.
    pub ci_half_width_s: Option<f64>,
    pub speedup: f64,
    pub efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub tasks: usize,
    pub repeats: usize,
    pub task_cost: String,
    pub rows: Vec<ScalingRow>,
}

/// Mean and confidence half-width of a sample.
pub fn mean_ci(xs: &[f64], confidence: f64) -> (f64, Option<f64>) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.5 + confidence / 2.0);
    (mean, Some(t * (var / n as f64).sqrt()))
}

/// Runs the same exploration at every worker count, `repeats` times each.
/// Speedup is relative to the smallest worker count `w0`, scaled so that
/// `speedup(w0) = w0`.
pub fn strong_scaling_run(
    config: &ExplorationConfig,
    oracle: &StabilityOracle,
    workers: &[usize],
    repeats: usize,
) -> Result<ScalingTable, DatagenError> {
    if workers.is_empty() || repeats == 0 {
        return Err(DatagenError::Config("need at least one worker count and one repeat".into()));
    }
    let mut tasks = 0;
    let mut rows: Vec<ScalingRow> = Vec::new();
    for &w in workers {
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let (_, m) = explore(config, oracle, w)?;
            tasks = m.tasks;
            times.push(m.makespan_s);
        }
        let (mean_s, ci) = mean_ci(&times, CONFIDENCE);
        log::info!("{w} workers: {mean_s:.3} s");
        rows.push(ScalingRow {
            workers: w,
            times_s: times,
            mean_s,
            ci_half_width_s: ci,
            speedup: 0.0,
            efficiency: 0.0,
        });
    }
    let base = rows.iter().min_by_key(|r| r.workers).map(|r| (r.workers, r.mean_s)).unwrap();
    for r in &mut rows {
        r.speedup = base.0 as f64 * base.1 / r.mean_s;
        r.efficiency = r.speedup / r.workers as f64;
    }
    Ok(ScalingTable {
        tasks,
        repeats,
        task_cost: oracle.cost().describe(),
        rows,
    })
}

impl ScalingTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DatagenError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["workers", "repeats", "tasks", "mean_s", "ci95_half_width_s", "speedup", "efficiency"])?;
        for r in &self.rows {
            w.write_record([
                r.workers.to_string(),
                self.repeats.to_string(),
                self.tasks.to_string(),
                format!("{:.6}", r.mean_s),
                r.ci_half_width_s.map(|c| format!("{c:.6}")).unwrap_or_default(),
                format!("{:.4}", r.speedup),
                format!("{:.4}", r.efficiency),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Closed-form cluster model: `T(n) = max(W / (slots·n), levels·t) + o·tasks / n`,
/// where `W = tasks·t`, the second term of the max is the critical path of
/// `levels` dependent waves and `o` is the per-task dispatch overhead paid by
/// the coordinator of each node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedCluster {
    pub tasks: u64,
    pub task_s: f64,
    pub slots_per_node: u64,
    pub levels: u32,
    pub dispatch_overhead_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedRow {
    pub nodes: u64,
    pub time_s: f64,
    pub speedup: f64,
    pub efficiency: f64,
}

impl SimulatedCluster {
    pub fn makespan(&self, nodes: u64) -> f64 {
        let n = nodes as f64;
        let work = self.tasks as f64 * self.task_s;
        let compute = (work / (self.slots_per_node as f64 * n)).max(self.levels as f64 * self.task_s);
        compute + self.dispatch_overhead_s * self.tasks as f64 / n
    }

    pub fn table(&self, nodes: &[u64]) -> Vec<SimulatedRow> {
        let t1 = self.makespan(1);
        nodes
            .iter()
            .map(|&n| {
                let time_s = self.makespan(n);
                let speedup = t1 / time_s;
                SimulatedRow {
                    nodes: n,
                    time_s,
                    speedup,
                    efficiency: speedup / n as f64,
                }
            })
            .collect()
    }
}
