use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the mathematical domain of a closed-form kernel.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An iterative solver hit its iteration cap. `trend` holds the tail of
    /// the residual history so divergence is distinguishable from stagnation.
    #[error("no convergence after {iterations} iterations: residual {residual:.3e}, trend {trend:?}")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        trend: Vec<f64>,
    },

    #[error(
        "requested spacing constant c0={requested} is infeasible for m={m} (achievable c0={achievable:.6})"
    )]
    InfeasibleSpacing {
        requested: f64,
        achievable: f64,
        m: usize,
    },

    #[error("linear program failed: {0}")]
    Lp(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
