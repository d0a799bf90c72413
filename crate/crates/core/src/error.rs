use thiserror::Error;

/// Errors surfaced by tensor ops, model assembly, data generation and I/O.
#[derive(Debug, Error)]
pub enum XmsError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite values detected in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing gradient for trainable parameter '{0}'")]
    MissingGradient(String),
}

impl XmsError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        XmsError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, XmsError>;
