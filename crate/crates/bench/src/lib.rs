//! The three experiments: sensor bandwidth under each aggregation method,
//! response time of triggered computations with and without offloading,
//! and strong scaling of the dataset generator.

pub mod exp1;
pub mod exp2;
pub mod exp3;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error("run failed: {0}")]
    Run(String),
    #[error(transparent)]
    Config(#[from] edgetwin_core::config::ConfigError),
    #[error(transparent)]
    Edge(#[from] edgetwin_runtime::edge::EdgeError),
    #[error(transparent)]
    Bus(#[from] edgetwin_messaging::BusError),
    #[error(transparent)]
    Datagen(#[from] edgetwin_datagen::DatagenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
