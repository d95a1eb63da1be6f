//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by tensor math, data loading, training, and checkpointing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument for {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("{path}:{line}: {reason}")]
    MalformedRecord {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("referential integrity violated at {path}:{line}: {reason}")]
    IntegrityViolation {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("class {class} has only {available} labeled items, need {needed}")]
    InsufficientClassItems {
        class: String,
        available: usize,
        needed: usize,
    },

    #[error("training diverged: loss is not finite at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("training diverged: loss is not finite at episode {episode}")]
    DivergedEpisode { episode: usize },

    #[error("checkpoint holds a {found:?} model, expected {expected:?}")]
    ModelKindMismatch { expected: String, found: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("nondeterministic closure: two forward passes disagree ({first} vs {second})")]
    NondeterministicClosure { first: f64, second: f64 },

    #[error("unknown answer id {0:?}")]
    UnknownAnswerId(String),

    #[error("unknown label class {0:?}")]
    UnknownLabelClass(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}
