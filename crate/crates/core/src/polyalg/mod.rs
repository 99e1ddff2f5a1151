//! Sparse multivariate polynomial and polynomial-matrix arithmetic over a
//! registry of named scalar indeterminates: entries of the plant matrices,
//! noise samples, and auxiliary decision scalars.

mod matrix;
mod monomial;
mod poly;
mod registry;

pub use matrix::PolyMatrix;
pub use monomial::{monomial_basis, Monomial};
pub use poly::{Assignment, Poly};
pub use registry::{VarGroup, VarId, VarRegistry};

use thiserror::Error;

/// Coefficients with magnitude below this are dropped after every
/// arithmetic op, so cancellation dust cannot bloat the sparse maps.
pub const COEFF_DROP_TOL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum PolyError {
    #[error("no value assigned for variable `{0}`")]
    MissingAssignment(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Binomial coefficient as usize; panics on overflow, which for the sizes
/// handled here (v <= a few hundred, k <= 4) cannot occur.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    usize::try_from(acc).expect("binomial overflow")
}
