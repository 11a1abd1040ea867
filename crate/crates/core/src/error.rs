use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("label/token length mismatch at line {line}: {tokens} tokens, {tags} tags")]
    LengthMismatch {
        line: usize,
        tokens: usize,
        tags: usize,
    },

    #[error("unknown tag scheme at line {line}: tag {tag:?} is not O, B-X or I-X")]
    UnknownTagScheme { line: usize, tag: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("task mismatch: expected {expected}, found {found}")]
    TaskMismatch { expected: String, found: String },

    #[error("invalid split configuration: {0}")]
    Split(String),

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("trainer does not support {0}")]
    UnsupportedCapability(String),

    #[error("external trainer error: {0}")]
    Trainer(String),

    #[error("external trainer protocol violation (request {request_id}): {message}")]
    Protocol { request_id: u64, message: String },

    #[error("invalid drift configuration: {0}")]
    DriftConfig(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures originating in a trainer (built-in or external).
    pub fn is_trainer_error(&self) -> bool {
        matches!(
            self,
            Error::Trainer(_) | Error::Protocol { .. } | Error::UnsupportedCapability(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
