use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-deterministic function: {0}")]
    NonDeterministic(String),

    #[error("bad magic: expected \"EPOC1\\0\", found {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("truncated header: missing field `{field}`")]
    TruncatedHeader { field: &'static str },

    #[error("invalid header field `{field}`: {reason}")]
    InvalidHeader { field: &'static str, reason: String },

    #[error("truncated payload: expected {expected} bytes after header, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("label out of range: trial {trial} has label {label} but n_classes = {n_classes}")]
    LabelOutOfRange {
        trial: usize,
        label: u32,
        n_classes: u32,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
