use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("model dimension {dim} is not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("every key position is masked for at least one query")]
    AllMasked,
    #[error("sinusoidal embedding dimension must be even, got {0}")]
    OddDimension(usize),
    #[error("invalid network spec: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
