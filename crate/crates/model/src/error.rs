use thiserror::Error;

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("query row {0} allows no key")]
    RowFullyMasked(usize),
    #[error("mask dimension {mask} does not match sequence length {seq}")]
    LengthMismatch { mask: usize, seq: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("predict set is empty")]
    EmptyPredictSet,
    #[error("loss became non-finite at step {step}")]
    DivergenceDetected { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] convsink::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
