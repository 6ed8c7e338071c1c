//! Certifiably optimal cardinality-constrained estimation of sparse precision
//! matrices.
//!
//! The outer solver ([`cutplane`]) searches over supports with a
//! branch-and-bound driven by affine cuts; each cut comes from a dual
//! certificate of a covariance-selection subproblem ([`covsel`]).

pub mod bigm;
pub mod covsel;
pub mod cutplane;
mod error;
pub mod linalg;
pub mod model;
pub mod structure;
pub mod support;
pub mod synthetic;

pub use covsel::{BigMBounds, CovSelOptions, CovSelSolution, EntryPenalty, Regularizer};
pub use cutplane::{Cut, SolveOptions, SolveResult};
pub use error::{Error, Result};
pub use linalg::{CholeskyFactor, SymmetricMatrix};
pub use structure::StructuralConstraint;
pub use support::Support;

/// Magnitude at or below which a matrix entry is read as zero.
pub const ZERO_THRESHOLD: f64 = 1e-10;
