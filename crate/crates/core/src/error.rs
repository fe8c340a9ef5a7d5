use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RfaError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("split index out of range: {0}")]
    SplitIndex(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Idx(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown architecture: {0}")]
    UnknownArchitecture(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
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

pub type Result<T, E = RfaError> = std::result::Result<T, E>;

impl RfaError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        RfaError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RfaError::Io {
            path: path.into(),
            source,
        }
    }
}
