//! Experiment configuration, the end-to-end runner and the command-line
//! front end for `fednn-core`.

pub mod commands;
pub mod config;
pub mod experiment;

pub use config::{ConfigError, ExpMethod, ExperimentConfig};
pub use experiment::{run_experiment, ExperimentError, MethodReport, Report, REPORT_VERSION};
