use thiserror::Error;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Configuration,
    Data,
    Numerical,
    AssumptionViolation,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("quadrature did not converge for {what}: successive refinements differ by {diff:.3e} (tol {tol:.1e})")]
    Quadrature { what: String, diff: f64, tol: f64 },

    #[error("degenerate variance: quadratic form v'Vv = {value:.6e} is not positive")]
    DegenerateVariance { value: f64 },

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Configuration,
            Error::Data(_) | Error::Io(_) => ErrorCategory::Data,
            Error::Numerical(_) | Error::Quadrature { .. } | Error::DegenerateVariance { .. } => {
                ErrorCategory::Numerical
            }
            Error::Assumption(_) => ErrorCategory::AssumptionViolation,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
