use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto its exit-code contract:
/// data/parse/config errors exit 2, numeric failures exit 3.
#[derive(Debug, Error)]
pub enum CafeError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CafeError>;

impl CafeError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CafeError::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CafeError::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CafeError::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CafeError::Numeric(msg.into())
    }
}
