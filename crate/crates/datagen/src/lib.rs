//! Generates labeled stability datasets by recursively exploring a box of
//! operating points.
//!
//! The root region is sampled, every point is labeled by a
//! [`StabilityOracle`], and regions are subdivided along the coordinate
//! that best separates their labels until the depth limit. Oracle calls
//! are the unit of parallel work; [`strong_scaling_run`] times a fixed
//! exploration over several pool sizes.

mod explore;
mod oracle;
mod region;
mod scaling;
mod split;

pub use explore::{
    explore, full_task_count, write_outputs, Expansion, ExplorationConfig, LabeledDataset, LevelMetrics, Record,
    RunMetrics, Sampler,
};
pub use oracle::{work_rate, StabilityOracle, TaskCost};
pub use region::{subdivide, Region, RegionId};
pub use scaling::{mean_ci, strong_scaling_run, ScalingRow, ScalingTable, SimulatedCluster, SimulatedRow, CONFIDENCE};
pub use split::{best_threshold, binary_entropy, entropy, select_split_dimension, Label, Split};

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("entropy of an empty label set")]
    EmptyLabels,
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
