use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

/// Errors surfaced by the library. File-format problems get their own
/// variants so callers can tell a truncated file from a corrupted one.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a {expected} file (bad magic)")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated ({what})")]
    Truncated { path: PathBuf, what: String },
    #[error("{path}: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum {
        path: PathBuf,
        stored: u64,
        computed: u64,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
