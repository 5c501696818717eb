use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("operation requires a scalar model (m = n = 1), got m = {m}, n = {n}")]
    NotScalar { m: usize, n: usize },

    #[error("stability violation: {0}")]
    Stability(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("increments not aligned to knot spacing: {0}")]
    Alignment(String),

    #[error("degenerate density: mass = {0}")]
    DegenerateDensity(f64),

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("regime precondition failed: {0}")]
    Regime(String),

    #[error("fitness kernel is not symmetric (max asymmetry {0:e})")]
    Symmetry(f64),

    #[error("step size too large: {0}")]
    StepSize(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
