use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration. The CLI maps this to exit code 2.
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("target index {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape (higher-order or repeated backward is unsupported)")]
    DoubleBackward,

    #[error("context overflow: prompt length {prompt} + input length {input} exceeds max context {max_context}")]
    ContextOverflow {
        prompt: usize,
        input: usize,
        max_context: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("insufficient examples for label '{label}': have {have}, need {need}")]
    InsufficientExamples {
        label: String,
        have: usize,
        need: usize,
    },

    #[error("vocabulary mismatch; missing tokens: {0:?}")]
    VocabMismatch(Vec<String>),

    #[error("unknown category '{got}'; expected one of: {allowed}")]
    UnknownCategory { got: String, allowed: String },

    #[error("frozen parameters drifted during training: {0:?}")]
    FrozenDrift(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnknownCategory { .. }
        )
    }
}
