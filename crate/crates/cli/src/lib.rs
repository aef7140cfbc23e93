//! Configuration parsing and subcommands of the `biload` binary.

pub mod commands;
pub mod config;

pub use commands::{run, CliError, Command, Outcome};
pub use config::{parse_config, ConfigError, RunSpec};
