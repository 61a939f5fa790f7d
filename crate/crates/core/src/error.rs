use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by loaders, the model and the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing month {month} for state {state}")]
    MissingMonth { state: String, month: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("value error: {0}")]
    Value(String),
    #[error("unknown state: {0}")]
    UnknownState(String),
    #[error("self loop on state {0}")]
    SelfLoop(String),
    #[error("split has {len} months but a window needs {need}")]
    SplitTooShort { len: usize, need: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing embedding for entity {0:?}")]
    MissingEmbedding(String),
    #[error("policy knowledge graph is empty")]
    EmptyKg,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("split mismatch: {0}")]
    SplitMismatch(String),
    #[error("window out of range: {0}")]
    WindowOutOfRange(String),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("unknown policy: {0}")]
    UnknownPolicy(String),
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("search budget must be at least 1")]
    BudgetZero,
    #[error("search space of {0} schedules exceeds the enumeration limit")]
    SpaceTooLarge(u128),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
