//! Config-driven experiment runner on top of `shjb-core`.
//!
//! A TOML config picks a built-in problem plus tree, grid and schedule
//! parameters; [`run_experiment`] runs one command on it and [`emit_report`]
//! writes the resulting tables as CSV.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod verify;

pub use commands::{run_experiment, Command, Outcome};
pub use config::ExperimentConfig;
pub use error::CliError;
pub use report::{emit_report, Table};
pub use verify::Check;

/// Environment variable fixing the worker thread count.
pub const THREADS_ENV: &str = "HJB_LAB_THREADS";
