use thiserror::Error;

use crate::weights::WeightError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid config field `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Core(#[from] omnimoe::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    pub fn config(key: &str, reason: impl Into<String>) -> Self {
        CliError::Config { key: key.to_string(), reason: reason.into() }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// 1 for failed checks, 2 for usage and config errors, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ChecksFailed(_) => 1,
            CliError::Usage(_) | CliError::Config { .. } => 2,
            _ => 3,
        }
    }
}
