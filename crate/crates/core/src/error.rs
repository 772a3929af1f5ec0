use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("unknown scene `{0}`")]
    UnknownScene(String),

    #[error("scene `{0}` already exists")]
    DuplicateScene(String),

    #[error("non-finite gradient in parameter {path}")]
    NonFinite { path: String },

    #[error("invalid config value for `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("dataset {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }

    pub fn ingest(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingest { path: path.into(), reason: reason.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
