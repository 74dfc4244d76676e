//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate embedding")]
    DegenerateEmbedding,

    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("index {index} out of range (len {len}) in {context}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pretraining aborted: non-finite loss at epoch {epoch}")]
    PretrainDiverged { epoch: usize },

    #[error("episode aborted: non-finite loss at step {step}")]
    EpisodeDiverged { step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint `{path}` not found; run the `pretrain` subcommand first or enable pretraining in the config")]
    MissingCheckpoint { path: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
