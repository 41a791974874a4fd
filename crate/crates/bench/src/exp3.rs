//! Strong scaling of the dataset generator: measured on this host, and a
//! closed-form model of a cluster with the reference task parameters.

use edgetwin_datagen::{
    full_task_count, strong_scaling_run, ExplorationConfig, ScalingTable, SimulatedCluster, SimulatedRow,
    StabilityOracle, TaskCost,
};
use serde::Serialize;

use crate::BenchError;

#[derive(Debug, Clone)]
pub struct Exp3Spec {
    pub dims: usize,
    pub depth: u32,
    pub branch: usize,
    pub points: usize,
    pub workers: Vec<usize>,
    pub repeats: usize,
    pub task_cost: TaskCost,
    pub seed: u64,
    pub cluster: SimulatedCluster,
    pub nodes: Vec<u64>,
}

/// 14,450 tasks of 23.62 s on 112-slot nodes.
pub fn reference_cluster(dispatch_overhead_s: f64) -> SimulatedCluster {
    SimulatedCluster {
        tasks: full_task_count(170, 4, 3),
        task_s: 23.62,
        slots_per_node: 112,
        levels: 4,
        dispatch_overhead_s,
    }
}

pub const DEFAULT_DISPATCH_OVERHEAD_S: f64 = 0.05;

impl Default for Exp3Spec {
    fn default() -> Self {
        Self {
            dims: 6,
            depth: 3,
            branch: 4,
            points: 20,
            workers: vec![1, 2, 4, 8],
            repeats: 3,
            task_cost: TaskCost::Work(20.0),
            seed: 11,
            cluster: reference_cluster(DEFAULT_DISPATCH_OVERHEAD_S),
            nodes: vec![1, 2, 4, 8, 16, 32, 64],
        }
    }
}

impl Exp3Spec {
    pub fn exploration(&self) -> ExplorationConfig {
        ExplorationConfig {
            seed: self.seed,
            ..ExplorationConfig::unit(self.dims, self.depth, self.branch, self.points)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Exp3Result {
    pub measured: ScalingTable,
    pub cluster: SimulatedCluster,
    pub simulated: Vec<SimulatedRow>,
    pub host_cpus: usize,
}

pub fn simulate(cluster: &SimulatedCluster, nodes: &[u64]) -> Vec<SimulatedRow> {
    cluster.table(nodes)
}

pub fn run_exp3(spec: &Exp3Spec) -> Result<Exp3Result, BenchError> {
    let config = spec.exploration();
    let oracle = StabilityOracle::new(&config.bounds, spec.seed).with_cost(spec.task_cost);
    let measured = strong_scaling_run(&config, &oracle, &spec.workers, spec.repeats)?;
    Ok(Exp3Result {
        measured,
        cluster: spec.cluster,
        simulated: simulate(&spec.cluster, &spec.nodes),
        host_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
    })
}

impl Exp3Result {
    pub fn write_simulated_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["nodes", "time_s", "speedup", "efficiency", "dispatch_overhead_s"])?;
        for r in &self.simulated {
            w.write_record([
                r.nodes.to_string(),
                format!("{:.3}", r.time_s),
                format!("{:.4}", r.speedup),
                format!("{:.4}", r.efficiency),
                self.cluster.dispatch_overhead_s.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "Strong scaling, {} tasks, {}, {} repeats, {} host CPUs\n{:>8} {:>10} {:>10} {:>8} {:>10}\n",
            self.measured.tasks,
            self.measured.task_cost,
            self.measured.repeats,
            self.host_cpus,
            "workers",
            "mean_s",
            "ci95_s",
            "speedup",
            "efficiency"
        );
        for r in &self.measured.rows {
            let ci = r.ci_half_width_s.map_or_else(|| "-".to_string(), |c| format!("{c:.3}"));
            s.push_str(&format!(
                "{:>8} {:>10.3} {:>10} {:>8.2} {:>10.3}\n",
                r.workers, r.mean_s, ci, r.speedup, r.efficiency
            ));
        }
        s.push_str(&format!(
            "Simulated cluster, {} tasks x {} s, {} slots/node, dispatch overhead {} s\n{:>8} {:>12} {:>8} {:>10}\n",
            self.cluster.tasks,
            self.cluster.task_s,
            self.cluster.slots_per_node,
            self.cluster.dispatch_overhead_s,
            "nodes",
            "time_s",
            "speedup",
            "efficiency"
        ));
        for r in &self.simulated {
            s.push_str(&format!(
                "{:>8} {:>12.2} {:>8.2} {:>10.3}\n",
                r.nodes, r.time_s, r.speedup, r.efficiency
            ));
        }
        s
    }
}
