use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },

    #[error("schema version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("template error: {0}")]
    Template(String),

    #[error("intervention error: {0}")]
    Intervention(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },

    #[error("transport error: gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<Error> },

    #[error("request timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("missing api key: environment variable {0} is not set")]
    MissingApiKey(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("rubric error: {0}")]
    Rubric(String),

    #[error("patch error: {0}")]
    Patch(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Retrying may succeed: rate limits, server errors and timeouts.
    pub fn is_retryable(&self) -> bool {
        match self {
            Error::Status { status, .. } => *status == 429 || (500..600).contains(status),
            Error::Timeout(_) | Error::Transport(_) => true,
            _ => false,
        }
    }
}
