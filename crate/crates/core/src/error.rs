use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("failed to parse {what} at line {line}, column {column}: {message}")]
    Parse {
        what: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema violation in `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("object {object_id} of image {image_id} lies outside the image bounds")]
    OutOfBounds { image_id: u64, object_id: u64 },

    #[error("image {image_id} has {found} objects, at least {required} are required")]
    InsufficientObjects {
        image_id: u64,
        found: usize,
        required: usize,
    },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("vector has zero norm")]
    ZeroNorm,

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("unknown prompt style `{0}`")]
    UnknownStyle(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("timeout after {0} ms")]
    Timeout(u64),

    #[error("provider error [{code}]: {message}")]
    Provider { code: String, message: String },

    #[error("request rejected: {0}")]
    Precondition(String),

    #[error("stage `{stage}` failed: {source}\n  replay with: {command}")]
    Stage {
        stage: String,
        command: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
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

    /// Transport failures and timeouts may succeed on retry; everything else is deterministic.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::Timeout(_))
    }
}
