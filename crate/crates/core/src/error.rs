use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("probability row sums to {sum}, expected 1")]
    NotADistribution { sum: f64 },
    #[error("sequence of {len} positions exceeds max_seq_len {max}")]
    SequenceOverflow { len: usize, max: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("temperature must be >= 0, got {0}")]
    NegativeTemperature(f64),
    #[error("top-k of {k} requested over a vocabulary of {vocab}")]
    TopKTooLarge { k: usize, vocab: usize },
    #[error("log-density undefined: {0}")]
    DegenerateDensity(String),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("validation history is empty")]
    EmptyHistory,
    #[error("cannot encode {0:?}")]
    Unencodable(String),
    #[error("question is empty")]
    EmptyQuestion,
    #[error("infeasible task spec: {0}")]
    InfeasibleSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {reason} (batch dumped to {dump})")]
    Diverged {
        step: usize,
        reason: String,
        dump: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
