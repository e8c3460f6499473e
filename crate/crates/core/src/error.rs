use std::path::PathBuf;

use thiserror::Error;

/// Errors reported by corpus loading, masking, training, and evaluation.
#[derive(Debug, Error)]
pub enum SmlmError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("corrupted artifact {path}: {reason}")]
    CorruptedArtifact { path: PathBuf, reason: String },

    #[error("unknown style label `{0}`")]
    UnknownLabel(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{0}")]
    Unsupported(String),
}

impl SmlmError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SmlmError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SmlmError>;
