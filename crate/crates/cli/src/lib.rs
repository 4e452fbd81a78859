//! Command-line driver: a JSON run config, one command per pipeline stage,
//! CSV/JSON artifacts and a manifest per run.

pub mod artifacts;
pub mod checkpoint;
pub mod clock;
pub mod commands;
pub mod config;
pub mod error;

pub use commands::{execute, Command, RunOutcome};
pub use config::RunConfig;
pub use error::{CliError, CliResult, EXIT_OK, EXIT_RUN_FAILURE, EXIT_USAGE};
