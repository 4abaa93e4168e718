//! Library side of the `krlm` command: configuration resolution, run
//! manifests and the subcommand implementations.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

pub use config::{parse_config, ConfigError, Resolved, RunConfig};
pub use error::CliError;
