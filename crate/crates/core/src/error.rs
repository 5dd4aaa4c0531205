use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mixture: {0}")]
    InvalidMixture(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index {index} out of range for dimension {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("disorder of {requested} bytes exceeds the budget of {budget} bytes")]
    BudgetExceeded { requested: u128, budget: u128 },
    #[error("brute force refused: n = {n} exceeds the enumeration limit {limit}")]
    TooLargeForEnumeration { n: usize, limit: usize },
    #[error("pde grid too small: x_max = {x_max} but at least {required} is needed")]
    GridTooSmall { x_max: f64, required: f64 },
    #[error("invalid order parameter: {0}")]
    InvalidGamma(String),
    #[error("calibration failed at step {step}: {reason}")]
    Calibration { step: usize, reason: String },
    #[error("numeric overflow at iteration {iteration}")]
    Overflow { iteration: usize },
    #[error("cannot project the zero vector onto the sphere")]
    ZeroVector,
    #[error("malformed disorder file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
