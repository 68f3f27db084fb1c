use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    #[error("malformed record header: {0}")]
    MalformedHeader(String),

    #[error("sample count mismatch: header declares {expected} values, payload holds {found}")]
    SampleCountMismatch { expected: usize, found: usize },

    #[error("unsupported format version {0}")]
    UnknownVersion(u32),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed sequence: {0}")]
    MalformedSequence(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("template error: {0}")]
    Template(String),

    #[error("item not generable: {0}")]
    NotGenerable(String),

    #[error("network failure after {attempts} attempts: {message}")]
    Network { attempts: usize, message: String },

    #[error("authentication failed (HTTP {status})")]
    Auth { status: u16 },

    #[error("HTTP {status}: {excerpt}")]
    Http { status: u16, excerpt: String },

    #[error("could not parse response: {message}; payload: {excerpt}")]
    Parse { message: String, excerpt: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// First `max` characters of `s`, for error messages that echo payloads.
pub(crate) fn excerpt(s: &str, max: usize) -> String {
    let mut out: String = s.chars().take(max).collect();
    if s.chars().count() > max {
        out.push_str("...");
    }
    out
}
