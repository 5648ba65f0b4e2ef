//! Configuration-driven experiments on top of `homodecouple`.
//!
//! Every command writes plot-ready CSV (or JSON) files plus a `run.json`
//! manifest recording the command, seed and resolved configuration.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::Output;
pub use config::{ExperimentConfig, Format};
pub use error::{CliError, CliResult};
