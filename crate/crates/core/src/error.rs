use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown character {ch:?} at position {position}")]
    UnknownChar { ch: char, position: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("invalid example: {0}")]
    InvalidExample(String),

    #[error("invalid generator config: {0}")]
    GenConfig(String),

    #[error("{path}:{line}: {msg}")]
    Jsonl {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dataset kind mismatch: expected {expected}, found {found}")]
    KindMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("sequence of length {len} exceeds context window {n_ctx}")]
    ContextOverflow { len: usize, n_ctx: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("invalid loss spec: {0}")]
    LossSpec(String),

    #[error("parameter shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty holdout set")]
    EmptyHoldout,

    #[error("missing auxiliary checkpoint: {0}")]
    MissingCheckpoint(&'static str),

    #[error("oracle budget exceeded: {0}")]
    OracleBudget(String),

    #[error("invalid weighting: {0}")]
    Weighting(String),

    #[error("invalid train config: {0}")]
    TrainConfig(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("report: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
