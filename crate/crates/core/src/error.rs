use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mode {mode} out of range for a tensor of order {order}")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("rank {rank} out of range [1, {max}]")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("blob checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("truncated blob: expected {expected} bytes, found {actual}")]
    TruncatedBlob { expected: usize, actual: usize },

    #[error("unknown layer kind `{0}`")]
    UnknownKind(String),

    #[error("unsupported format version {found} (this build reads version {supported})")]
    VersionSkew { found: u32, supported: u32 },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("malformed CIFAR file {path}: {reason}")]
    Cifar { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver:
    /// 2 bad arguments, 3 I/O or format error, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::ModeOutOfRange { .. }
            | Error::RankOutOfRange { .. }
            | Error::Config(_)
            | Error::EmptyDataset => 2,
            Error::NonFinite(_) | Error::Numeric(_) => 4,
            Error::ChecksumMismatch { .. }
            | Error::TruncatedBlob { .. }
            | Error::UnknownKind(_)
            | Error::VersionSkew { .. }
            | Error::Manifest(_)
            | Error::Cifar { .. }
            | Error::Io { .. }
            | Error::Json(_) => 3,
        }
    }
}
