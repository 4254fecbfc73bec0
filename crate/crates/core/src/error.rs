use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("image codec error on {path}: {reason}")]
    Codec { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unknown layer id `{0}`")]
    UnknownLayer(String),

    #[error("malformed archive {path} at byte offset {offset}: {reason}")]
    Archive {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("non-finite loss in term {term} at step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
