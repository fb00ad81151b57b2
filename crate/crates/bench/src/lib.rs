//! Experiment drivers: condition curves, subset-selection curves, the
//! synthetic learning comparison and generation-time scaling.

pub mod config;
pub mod cond;
pub mod record;
pub mod runtime;
pub mod subset;
pub mod synth;

pub use config::ExperimentConfig;
pub use record::{RunRecord, Summary};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] spectralds::Error),

    #[error("invalid experiment config: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;
