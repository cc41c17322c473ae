use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    /// A corpus invariant was violated. `instance` names the offending instance when known.
    #[error("validation error{}: {message}", instance.as_ref().map(|i| format!(" in instance `{i}`")).unwrap_or_default())]
    Validation {
        instance: Option<String>,
        message: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A metric has no defined value for the given input (degenerate labels, zero variance).
    #[error("undefined metric: {0}")]
    Undefined(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn validation(instance: Option<&str>, message: impl Into<String>) -> Self {
        Error::Validation {
            instance: instance.map(str::to_owned),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
