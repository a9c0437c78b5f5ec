//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown architecture id: {0}")]
    UnknownArchitecture(String),

    #[error("parameter {name} missing or incompatible: {reason}")]
    Parameter { name: String, reason: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },

    #[error("corrupt file {path}: {reason} (byte offset {offset})")]
    CorruptFile {
        path: PathBuf,
        reason: String,
        offset: u64,
    },

    #[error("unknown dataset format: {0}")]
    UnknownFormat(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stale artifact: {0}")]
    StaleArtifact(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
