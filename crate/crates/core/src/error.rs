use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A truncation set carries (numerically) no probability mass.
    #[error("negligible probability mass: {0}")]
    NumericalMass(String),

    #[error("quadrature did not converge for entry {index}: estimated error {error:e}")]
    Quadrature { index: usize, error: f64 },

    #[error("ill-conditioned Gram matrix (condition number {cond:e}) for ell={ell}, r={r}, sigma={sigma}")]
    Conditioning {
        cond: f64,
        ell: usize,
        r: f64,
        sigma: f64,
    },

    #[error("degenerate component estimate: positive part has mass {0:e}")]
    DegenerateEstimate(f64),

    #[error("slice sampler degenerate: {0}")]
    SliceDegenerate(String),

    #[error("non-finite value at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    #[error("invalid chain state: {0}")]
    InvalidState(String),
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
