use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum HcmlError {
    #[error("{op}: dimension mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("efficacy score undefined: acc_train ({train}) <= acc_test ({test})")]
    UndefinedScore { train: f64, test: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HcmlError>;

impl HcmlError {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        HcmlError::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
