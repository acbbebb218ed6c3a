use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Missing, unreadable or malformed inputs.
    #[error("{0}")]
    Input(String),

    /// A checkpoint or cache that does not match what it claims to be.
    #[error("{0}")]
    Mismatch(String),

    /// Every benchmark cell exceeded the score budget.
    #[error("{0}")]
    Budget(String),

    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Input(_) => 2,
            CliError::Mismatch(_) => 3,
            CliError::Budget(_) => 4,
        }
    }

    pub fn write(path: &Path, e: std::io::Error) -> CliError {
        CliError::Internal(format!("cannot write {}: {e}", path.display()))
    }
}

impl From<msd_core::Error> for CliError {
    fn from(e: msd_core::Error) -> Self {
        use msd_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Corrupt { .. } | E::ConfigMismatch(_) => CliError::Mismatch(msg),
            E::Io { .. } | E::Parse { .. } | E::Invalid(_) | E::Embedding { .. } => CliError::Input(msg),
            E::Shape { .. } | E::NonScalarLoss(_) | E::BatchTooSmall(_) => CliError::Internal(msg),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
