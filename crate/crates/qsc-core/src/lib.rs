//! Numerical quantum stochastic calculus on a truncated multi-channel Fock space.
//!
//! The crate builds a finite occupation-number model of the symmetric Fock space
//! over `L^2([0,T], C^d)` tensored with a finite initial space, constructs the
//! basic noise processes (annihilation, creation, conservation) slice by slice,
//! integrates adapted operator quadruples against their increments, and recovers
//! integrand families back from sampled operator martingales by two independent
//! routes (direct block reads and a reference-martingale pipeline) that are
//! cross-validated against each other.
//!
//! Layout:
//! - [`fock`]: basis enumeration, exponential vectors, pairings, diagonal weights.
//! - [`linalg`]: dense bridges (SVD norms, LU solves, matrix exponential).
//! - [`operators`]: sparse operator constructors, basic processes, product table checks.
//! - [`qsi`]: stochastic integrals, the matrix-element quadrature oracle, norm bounds.
//! - [`martingale`]: martingale/regularity checkers and the Wiener isometry sampler.
//! - [`represent`]: integrand extraction (block reads + pipeline) and cross-validation.
//! - [`scenario`]: named check suites shared by the CLI and the acceptance tests.

pub mod battery;
pub mod fock;
pub mod io;
pub mod linalg;
pub mod martingale;
pub mod operators;
pub mod qsi;
pub mod report;
pub mod represent;
pub mod scenario;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum QscError {
    #[error("basis dimension {dim} exceeds the memory budget {budget} (raise QSC_MAX_DIM to allow larger models)")]
    DimensionBudget { dim: u128, budget: usize },
    #[error("operands belong to different model spaces")]
    ModelMismatch,
    #[error("integrand at slice {slice} is not adapted to the slice's left endpoint")]
    NonAdapted { slice: usize },
    #[error("time {0} is not a grid point")]
    NonGridTime(f64),
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for QscError {
    fn from(e: serde_json::Error) -> Self {
        QscError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, QscError>;
