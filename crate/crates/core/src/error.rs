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

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty after filtering (min count {min_count})")]
    EmptyDataset { min_count: usize },

    #[error("sequence of length {len} is too short (need at least {min})")]
    SequenceTooShort { len: usize, min: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("collision group of size {size} exceeds collision capacity {capacity}")]
    CollisionOverflow { size: usize, capacity: usize },

    #[error("unknown item index {0}")]
    UnknownItem(usize),

    #[error("token id {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("bad file format: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
