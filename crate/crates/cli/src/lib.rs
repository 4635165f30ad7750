//! Experiment runner for the `kan-ntk` studies. Every subcommand reads one
//! JSON [`config::ExperimentConfig`] and writes its artifacts into a single
//! output directory.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod stats;

use kan_ntk::KanError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] KanError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Model(KanError::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "KAN_NTK_OUTPUT_ROOT";
