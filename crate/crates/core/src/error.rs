use thiserror::Error;

/// Errors raised by the calibration engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A model, grid or settings invariant does not hold. The message names it.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {what} at node {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("maturity {0} years does not fall on a time node")]
    OffGrid(f64),

    #[error("linear solver stalled after {iterations} iterations (residual {residual:e})")]
    LinearSolver { iterations: usize, residual: f64 },

    #[error("policy iteration at time node {node} did not converge in {iterations} iterations (last change {change:e})")]
    PolicyIteration {
        node: usize,
        iterations: usize,
        change: f64,
    },

    #[error("line search failed: {0}")]
    LineSearch(String),

    #[error("price {price} is outside the no-arbitrage bounds [{lower}, {upper}]")]
    ArbitrageBounds { price: f64, lower: f64, upper: f64 },

    #[error("numerical failure at time node {node}: {what}")]
    Numerical { node: usize, what: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
