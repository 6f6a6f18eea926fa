use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    /// Loss became non-finite. `member` is set when training an ensemble.
    #[error("training diverged at epoch {epoch}{}", member.map(|m| format!(" (member {m})")).unwrap_or_default())]
    TrainingDiverged { epoch: usize, member: Option<usize> },

    #[error("AUC-ROC undefined: dataset contains a single class")]
    AucUndefined,

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("shape inconsistency: {0}")]
    ShapeInconsistency(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
