use thiserror::Error;

/// Errors raised by estimators, allocation solvers and the weight loader.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dropout probability must lie in (0, 1), got {0}")]
    InvalidProbability(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("inner fidelity must be at least 2, got {0}")]
    FidelityTooSmall(usize),

    #[error("outer sample count must be at least 2, got {0}")]
    OuterCountTooSmall(usize),

    #[error("invalid fidelity ladder: {0}")]
    InvalidLadder(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid moments: {0}")]
    InvalidMoments(String),

    #[error("budget {budget} cannot afford the minimum allocation (needs {required})")]
    BudgetTooSmall { budget: f64, required: f64 },

    #[error("empty feasible set: {0}")]
    Infeasible(String),

    #[error("grid is not uniform: {0}")]
    NonUniformGrid(String),

    #[error("slope fit needs at least 3 points, got {0}")]
    InsufficientPoints(usize),

    #[error("log-log fit requires positive values, got {0} at index {1}")]
    NonPositiveValue(f64, usize),

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
