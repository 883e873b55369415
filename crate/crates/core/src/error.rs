use thiserror::Error;

/// Errors raised by the numerical modules.
///
/// Variants are grouped so callers can map them to process exit codes:
/// validation problems (bad input, violated preconditions) versus solver
/// failures (non-convergence, overflow during a solve).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("degenerate triangle {index} (signed area {area:e})")]
    DegenerateTriangle { index: usize, area: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("alpha = {alpha} is not admissible: discrete first Neumann eigenvalue is {lambda1}")]
    AlphaNotAdmissible { alpha: f64, lambda1: f64 },

    #[error("quadratic form is negative ({value:e}); alpha exceeds the discrete Neumann eigenvalue")]
    NegativeQuadraticForm { value: f64 },

    #[error("exponent overflow on triangle {triangle}: exponent {exponent:e}, max |u| = {max_abs:e}")]
    Overflow { triangle: usize, exponent: f64, max_abs: f64 },

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:e})")]
    NotConverged { what: String, iterations: usize, residual: f64 },

    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("fit annulus contains {found} nodes, at least {required} are needed; refine the mesh")]
    InsufficientFitNodes { found: usize, required: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of an iterative solver, as opposed to rejected input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. } | Error::NotPositiveDefinite { .. } | Error::Overflow { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
