use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A forward value went non-finite; `node` names the first offender.
    #[error("numeric failure at node {node}")]
    Numeric { node: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("merge error: {0}")]
    Merge(String),

    #[error("forbidden operation: {0}")]
    Forbidden(String),

    /// A named invariant was violated; the CLI exits with status 3.
    #[error("invariant violated [{name}]: {detail}")]
    Invariant { name: &'static str, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("fingerprint mismatch in {path}: stored {stored}, computed {computed}")]
    FingerprintMismatch {
        path: PathBuf,
        stored: String,
        computed: String,
    },

    #[error("truncated blob in {path}: expected {expected} bytes, found {found}")]
    TruncatedBlob {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionSkew { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
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

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invariant(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Invariant {
            name,
            detail: detail.into(),
        }
    }

    /// Process exit status used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invariant { .. } => 3,
            _ => 1,
        }
    }
}
