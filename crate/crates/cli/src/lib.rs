//! Command-line front end: run configuration, checkpoints and subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, CliResult};
