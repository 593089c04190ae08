//! Experiment harness: configuration, per-seed runs, result records and
//! aggregate reports behind the `sdpt-lab` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod record;
pub mod report;
pub mod run;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
pub use record::MetricsRecord;
