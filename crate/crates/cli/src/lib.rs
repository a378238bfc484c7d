//! Command implementations behind the `zoomtrace` binary.

pub mod commands;
pub mod config;

use thiserror::Error;

pub use commands::{cmd_ablate, cmd_curate, cmd_eval, cmd_rollout, cmd_validate_config};
pub use config::{Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Transport(_) => 4,
            CliError::Output { .. } => 1,
        }
    }
}
