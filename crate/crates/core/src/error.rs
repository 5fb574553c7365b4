//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: String, actual: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numerical domain error: {0}")]
    Numerical(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation error for record {id}: {msg}")]
    Validation { id: String, msg: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("credential error: {0}")]
    Credential(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("api error (status {status}): {body}")]
    Api { status: u16, body: String },

    #[error("mock protocol error: {0}")]
    MockProtocol(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Dimension {
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
