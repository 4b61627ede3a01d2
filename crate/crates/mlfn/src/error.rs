use std::io;
use std::path::PathBuf;

/// Failures of the command-line layer. Each maps onto a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] mlfn_core::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub const USAGE: i32 = 1;
    pub const VERIFICATION: i32 = 2;
    pub const DIVERGENCE: i32 = 3;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => Self::VERIFICATION,
            CliError::Core(mlfn_core::Error::Divergence { .. }) => Self::DIVERGENCE,
            _ => Self::USAGE,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> CliError {
        CliError::Format { path: path.into(), reason: reason.into() }
    }
}
