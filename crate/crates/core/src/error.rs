//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attention mask row {0} allows no keys")]
    InvalidMask(usize),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("empty context sequence")]
    EmptyContext,
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("degenerate embedding: self-kernel {0} is not positive")]
    DegenerateEmbedding(f64),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("degenerate density: variance {0} is not positive")]
    DegenerateDensity(f64),
    #[error("trajectory too short: need at least {needed} steps, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("training diverged: {0}")]
    TrainingDivergence(String),
    #[error("conditional embedding requires at least one observation")]
    RequiresContext,
    #[error("empty state")]
    EmptyState,
    #[error("objective evaluation failed: {0}")]
    Objective(String),
    #[error("action {0:?} lies outside the domain")]
    DomainViolation(Vec<f64>),
    #[error("evaluation budget of {0} samples exhausted")]
    BudgetExhausted(usize),
    #[error("cannot store an incomplete trajectory")]
    InvalidStore,
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("invalid slice: dimension {dim} exceeds base dimension {base}")]
    InvalidSlice { dim: usize, base: usize },
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("format error at row {row}: {message}")]
    Format { row: usize, message: String },
    #[error("point {0:?} is not a listed candidate")]
    NotACandidate(Vec<f64>),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("nothing to report")]
    NothingToReport,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
