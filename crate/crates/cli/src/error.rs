use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] retention_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{failed} verification check(s) failed")]
    Verification { failed: usize },

    #[error("non-finite value at step {step}: {source}; last good checkpoint written to {}", checkpoint.display())]
    NumericAbort {
        step: u64,
        checkpoint: PathBuf,
        source: retention_core::Error,
    },

    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use retention_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Verification { .. } => 4,
            CliError::NumericAbort { .. } => 5,
            CliError::Io(_) => 3,
            CliError::Core(e) => match e {
                E::Config(_) | E::Domain(_) => 2,
                E::Data(_) | E::Line { .. } | E::Checkpoint(_) | E::Io(_) | E::Json(_) | E::Csv(_) => 3,
                E::NonFinite { .. } => 5,
                E::Shape { .. } | E::Contract(_) => 1,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
