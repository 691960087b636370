//! Driver for federated experiments, theory checks and rate sweeps.

pub mod commands;
pub mod config;
mod output;

pub use commands::{run_checks, run_experiment, run_sweep, SweepRow};
pub use config::{parse_config, ExperimentConfig, Overrides, SEED_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] olala::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }
}
