use thiserror::Error;

/// Errors raised by the compute layer, model construction and the harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PetError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("empty output in {op}: {detail}")]
    EmptyOutput { op: &'static str, detail: String },

    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T, E = PetError> = std::result::Result<T, E>;

impl PetError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        PetError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        PetError::Config(detail.into())
    }
}

impl From<std::io::Error> for PetError {
    fn from(e: std::io::Error) -> Self {
        PetError::Io(e.to_string())
    }
}

impl From<csv::Error> for PetError {
    fn from(e: csv::Error) -> Self {
        PetError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for PetError {
    fn from(e: serde_json::Error) -> Self {
        PetError::Io(e.to_string())
    }
}
