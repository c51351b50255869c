use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("quadrature did not converge on [{a}, {b}] after {subdivisions} subdivisions")]
    Quadrature { a: f64, b: f64, subdivisions: usize },
    #[error("model has a breakpoint at {0}; the analytic ATM series does not apply")]
    Breakpoint(f64),
    #[error("singular surface at K={strike}, T={maturity}: {reason}")]
    SingularSurface {
        strike: f64,
        maturity: f64,
        reason: String,
    },
    #[error("root finding failed: {0}")]
    NoConvergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be finite, got {v}")))
    }
}
