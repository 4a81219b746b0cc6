//! Experiment driver: configuration, run directories and result tables.
//!
//! The `lil` binary is a thin layer over [`commands`]; everything it does is
//! also callable as a library for tests and scripts.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod tables;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
