use thiserror::Error;

/// Errors raised by the analysis routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate system: {0}")]
    Degenerate(String),

    #[error("fit is degenerate: {0}")]
    FitDegenerate(String),

    #[error("no convergence after {iterations} iterations (last cost {cost:e})")]
    NotConverged {
        iterations: usize,
        cost: f64,
        last: Vec<f64>,
    },

    #[error("inconsistent fit: {0}")]
    InconsistentFit(String),

    #[error("invalid fit: {0}")]
    InvalidFit(String),

    #[error("iteration diverged at step {iteration}; best residual {best_residual:e}")]
    Diverged {
        iteration: usize,
        best_residual: f64,
        best: Vec<f64>,
    },

    #[error("singular geometry: {0}")]
    SingularGeometry(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
