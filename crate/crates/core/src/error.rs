//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by tensor ops, model assembly, data loading and training.
#[derive(Debug, Error)]
pub enum TfkError {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dim {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("window error: grid {height}x{width} not divisible by window size {window}")]
    Window {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("label error for {label}: {msg}")]
    Label { label: String, msg: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TfkError>;

impl TfkError {
    pub(crate) fn dim(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        TfkError::Dim {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        TfkError::Contract {
            op,
            msg: msg.into(),
        }
    }
}
