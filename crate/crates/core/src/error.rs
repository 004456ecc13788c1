use thiserror::Error;

pub type Result<T> = std::result::Result<T, LatteError>;

#[derive(Debug, Error)]
pub enum LatteError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("degenerate distribution")]
    DegenerateDistribution,

    #[error("degenerate normalization")]
    DegenerateNormalization,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("logit magnitude {magnitude} exceeds the unshifted recursion limit {limit}; use the stabilized latte scan")]
    LogitRange { magnitude: f64, limit: f64 },

    #[error("empty sequence: T must be at least 1")]
    EmptySequence,

    #[error("sequence length {len} exceeds the brute-force oracle guard {guard}")]
    OracleGuard { len: usize, guard: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("position table exceeded: sequence length {len} > table size {table}")]
    PositionTableExceeded { len: usize, table: usize },

    #[error("non-finite loss at step {step} ({location})")]
    NonFiniteLoss { step: usize, location: String },

    #[error("infeasible packing: {0}")]
    InfeasiblePacking(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> LatteError {
    LatteError::Shape(msg.into())
}
