use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum ScapError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed binary file; `offset` is the byte position where decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A well-formed artifact that does not fit what it is being loaded against.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An invariant the pipeline must guarantee was broken (e.g. an empty keep-set).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing input {path}: {what}")]
    MissingInput { path: PathBuf, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ScapError>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::ScapError::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
