//! Command-line pipeline: corpus building, two-stage generator training,
//! evaluation, ablation, adaptation and reporting, driven by one JSON config.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{Experiment, MetricsRecord};
pub use config::{parse_config, ExperimentConfig};
pub use error::{CliError, Result};
