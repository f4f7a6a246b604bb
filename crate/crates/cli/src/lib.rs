//! Batch front end for funnel experiments.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod svg;

pub use commands::{cmd_compare, cmd_oracle, cmd_synthesize, cmd_trajgen, Report};
pub use config::{ExperimentConfig, Overrides};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("synthesis error: {0}")]
    Synthesis(String),
    #[error("oracle needs a linear system, got {0}")]
    Nonlinear(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Synthesis(_) => 2,
            CliError::Nonlinear(_) => 3,
        }
    }
}
