use thiserror::Error;

use crate::covsel::CovSelSolution;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix expected to be positive definite failed factorization.
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    /// A rank-two update would leave the positive definite cone.
    #[error("rank-two update is singular (determinant ratio {ratio})")]
    SingularUpdate { ratio: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The covariance-selection solver hit its iteration cap above the gap
    /// tolerance. The partial solution still carries a valid dual bound.
    #[error("covariance selection did not converge (gap {})", .0.gap)]
    Unconverged(Box<CovSelSolution>),

    /// Structural constraints admit no feasible support.
    #[error("no support satisfies the structural constraints")]
    Infeasible,

    #[error("could not generate a well-conditioned instance after {attempts} attempts")]
    DegenerateInstance { attempts: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
