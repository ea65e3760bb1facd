use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the workbench core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("episode already finished ({0})")]
    EpisodeDone(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("oracle search infeasible: {0}")]
    OracleInfeasible(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable identifier used in CLI and service error payloads.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::EpisodeDone(_) => "episode_done",
            Error::Dimension { .. } => "dimension",
            Error::OracleInfeasible(_) => "oracle_infeasible",
            Error::Diverged(_) => "diverged",
            Error::Usage(_) => "usage",
            Error::Schema { .. } => "schema",
            Error::Corrupt { .. } => "corrupt",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
