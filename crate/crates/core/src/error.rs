use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("positivity violation: h = {value:e} m at element {element}, t = {time} s")]
    Positivity { element: usize, time: f64, value: f64 },

    #[error("wave speed {c:.3} m/s at t = {time} s exceeds the stability limit {limit:.3} m/s")]
    WaveSpeed { time: f64, c: f64, limit: f64 },

    #[error("CFL violation: {0}")]
    Cfl(String),

    #[error("no convergence after {iterations} iterations ({reason}); last iterate {last:?}")]
    NoConvergence { iterations: usize, reason: String, last: Vec<f64> },

    #[error("second-order positivity violated: eigenvalue #{index} = {eigenvalue:e} gives 1 - lambda*eig = {factor:e}")]
    SormPositivity { index: usize, eigenvalue: f64, factor: f64 },

    #[error("{failed} of {total} forward solves failed (more than 1%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Dimension { .. } | Error::Cfl(_) | Error::Parse(_) | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}
