//! Experiment harness: configuration, sweeps over perturbation factors and
//! seeds, and the reports built from their outputs.

pub mod config;
pub mod error;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::CliError;
