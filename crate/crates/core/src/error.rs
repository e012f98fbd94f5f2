use thiserror::Error;

/// Errors surfaced by the model, training, decoding and I/O layers.
#[derive(Debug, Error)]
pub enum OrthrusError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cache overflow: {needed} positions requested, capacity {capacity}")]
    CacheOverflow { needed: usize, capacity: usize },
    #[error("invalid token {token} at index {index}")]
    InvalidToken { token: u32, index: usize },
    #[error("block of {len} tokens exceeds block size {max}")]
    BlockSize { len: usize, max: usize },
    #[error("stale cache: block starts at position {anchor_pos} but cache holds {committed} positions")]
    StaleCache { anchor_pos: usize, committed: usize },
    #[error("cannot truncate cache of length {committed} to {requested}")]
    Truncation { committed: usize, requested: usize },
    #[error("sequence of length {len} too short for block size {block}")]
    SequenceTooShort { len: usize, block: usize },
    #[error("block at anchor {anchor} with size {block} out of range for sequence of length {len}")]
    Bounds { anchor: usize, block: usize, len: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f32 },
    #[error("backbone is not sealed")]
    Unsealed,
    #[error("frozen backbone checksum mismatch: expected {expected}, found {found}")]
    ChecksumMismatch { expected: String, found: String },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("losslessness violation: outputs diverge at token {index}")]
    LosslessnessViolation { index: usize },
    #[error("undefined: {0}")]
    Undefined(&'static str),
    #[error("invalid transition matrix: {0}")]
    InvalidTransition(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OrthrusError>;
