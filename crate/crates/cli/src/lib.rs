//! Command-line harness: dataset generation, training, evaluation and
//! latency benchmarks driven by a TOML run config.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
