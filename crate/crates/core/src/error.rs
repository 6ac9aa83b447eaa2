use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("vector dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("candidate {0} has no recorded similarity; run fine screening first")]
    MissingSimilarity(String),

    #[error("expected a {expected}-masked example, got {actual}")]
    MaskKindMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("non-finite gradient encountered; step aborted")]
    NonFiniteGradient,

    #[error("auc undefined: need at least one positive and one negative record")]
    AucUndefined,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
