use thiserror::Error;

use crate::chain::IndexSet;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("edge has two vertices in part {0}")]
    RepeatedPart(usize),
    #[error("vertex {vertex} out of range for part {part} (size {size})")]
    VertexOutOfRange { part: usize, vertex: usize, size: usize },
    #[error("part {0} does not exist")]
    PartOutOfRange(usize),
    #[error("edge of size {size} exceeds uniformity {k}")]
    EdgeTooLarge { size: usize, k: usize },
    #[error("index {0} exceeds uniformity {1}")]
    IndexTooLarge(IndexSet, usize),
    #[error("index must be nonempty")]
    EmptyIndex,
    #[error("empty star at index {0}")]
    EmptyStar(IndexSet),
    #[error("chain is not down-closed: {0}")]
    NotDownClosed(String),
    #[error("zero density at index {0}")]
    ZeroDensity(IndexSet),
    #[error("parts do not align: {0}")]
    PartMismatch(String),
    #[error("function value out of range: {0}")]
    ValueOutOfRange(String),
    #[error("function not supported on its slice: {0}")]
    Unsupported(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("precondition not violated: {0}")]
    PreconditionNotViolated(String),
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("wrong dimension: expected {expected}, got {got}")]
    WrongDimension { expected: usize, got: usize },
    #[error("pattern not realizable: {0}")]
    NotRealizable(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
