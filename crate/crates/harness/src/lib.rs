//! Experiment harness: configs, training, evaluation, sweeps and reports.

pub mod config;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod sweep;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
