use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: expected {expected}, got {got}")]
    ShapeMismatch {
        axis: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("gradient for parameter `{name}` is not finite (first bad index {index})")]
    NonFiniteGradient { name: String, index: usize },

    #[error("training diverged at step {step}; last good checkpoint: {checkpoint:?}")]
    Diverged {
        step: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("arithmetic overflow while computing {0}")]
    Overflow(&'static str),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("wav: {0}")]
    Wav(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn mismatch(axis: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::ShapeMismatch {
            axis: axis.into(),
            expected,
            got,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
