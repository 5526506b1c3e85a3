//! Experiment pipeline: configuration, stage execution, projection export
//! and cross-seed reporting on top of `divrec-core`.

pub mod config;
pub mod error;
pub mod projection;
pub mod report;
pub mod stages;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use stages::{Runner, Stage};
