use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown filter `{0}` (expected ram-lak or hann)")]
    UnknownFilter(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("metal placement failed after {attempts} attempts on a {height}x{width} image")]
    PlacementFailed {
        attempts: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("payload length mismatch for {path}: expected {expected} bytes, found {actual}")]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("hash mismatch for {path}: header records {expected}, payload hashes to {actual}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("corrupt header {path}: {message}")]
    CorruptHeader { path: PathBuf, message: String },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: u64, message: String },

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("png: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
