//! Library half of the `neurodecode` binary: argument types, run
//! configuration, exit codes and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Cli, Command};
pub use config::{Preset, RunConfig, RUN_CONFIG_FILE};
pub use error::Failure;
