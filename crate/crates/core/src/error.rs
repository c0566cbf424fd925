use thiserror::Error;

/// Errors raised by the geometry, filtering and Monte Carlo routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point {point:?} lies outside the domain of chart `{chart}`")]
    Domain { chart: String, point: Vec<f64> },

    #[error("trajectory left the domain of chart `{chart}` at step {step}")]
    DomainExit { chart: String, step: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is singular or ill-conditioned (condition estimate {condition:.3e}) in {what}")]
    Singular { what: &'static str, condition: f64 },

    #[error("matrix is not positive definite in {0}")]
    NotPositiveDefinite(&'static str),

    #[error("Newton iteration for the inverse exponential map did not converge (residual {residual:.3e}, distance {distance:.3e})")]
    LogNotConverged { residual: f64, distance: f64 },

    #[error("sample {index}: {source}")]
    Sample { index: usize, source: Box<Error> },

    #[error("effective sample size {ess:.1} is below the minimum {min}")]
    EffectiveSampleSize { ess: f64, min: f64 },

    #[error("unsupported case: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
