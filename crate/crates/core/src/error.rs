use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("conversation has no utterances")]
    EmptyConversation,
    #[error("utterance {index} has no tokens")]
    EmptyUtterance { index: usize },
    #[error("utterance {utterance} contains the end-of-utterance id at offset {offset}")]
    EouInPayload { utterance: usize, offset: usize },
    #[error("utterance {utterance} contains the start id at offset {offset}")]
    BosInPayload { utterance: usize, offset: usize },
    #[error("start id and end-of-utterance id must differ (both {0})")]
    SameBosEou(u32),
    #[error("sequence does not begin with the start token")]
    MissingBos,
    #[error("sequence does not end with an end-of-utterance token")]
    TrailingTokens,
    #[error("utterance {0} is not covered by exactly one pair")]
    UnpairedUtterance(usize),
    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("cache expected position {expected}, got {got}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("cache has not observed any token")]
    EmptyCache,
    #[error("attention map has no sink columns")]
    NoSinkColumns,
    #[error("attention map has no normal (non-sink, non-first) columns")]
    NoNormalColumns,
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
