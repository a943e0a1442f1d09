use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header field `{field}`: {reason}")]
    Format { field: String, reason: String },

    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid phantom specification: {0}")]
    Spec(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse grouping used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Spec(_) => ErrorClass::Usage,
            Error::Degenerate(_) | Error::UndefinedMetric(_) => ErrorClass::Numerical,
            Error::Format { .. }
            | Error::Truncated { .. }
            | Error::Dimension(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorClass::Data,
        }
    }

    /// A [`Error::Format`] naming the offending field.
    pub fn format(field: &str, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
