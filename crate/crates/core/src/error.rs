use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("example {qid}: {}", violations.join("; "))]
    Validation { qid: String, violations: Vec<String> },

    #[error("example {qid}: {field} has {actual} entries, expected {expected}")]
    DimensionMismatch {
        qid: String,
        field: String,
        expected: usize,
        actual: usize,
    },

    #[error("example {qid}: assembled length {len} exceeds max_seq_len {max}")]
    Overflow { qid: String, len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("label {0:?} is not in the vocabulary")]
    UnknownLabel(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown qid(s): {}", .0.join(", "))]
    UnknownQid(Vec<String>),

    #[error("{0}")]
    NoTargets(String),

    #[error("vocabulary hash {actual} does not match the checkpoint's {expected}")]
    VocabMismatch { expected: String, actual: String },

    #[error("{path}: content changed since the manifest was written")]
    InputChanged { path: PathBuf },

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

    /// Process exit code for this error: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFinite(_) | Error::InvalidDistribution(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
