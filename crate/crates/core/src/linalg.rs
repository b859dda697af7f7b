//! Small dense helpers on top of nalgebra's symmetric eigensolver.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

const MAX_SWEEPS: usize = 100_000;

/// Symmetric eigendecomposition with eigenvalues in ascending order.
///
/// Ties keep the solver's original order, so the first eigenvector of a
/// repeated eigenvalue is deterministic.
pub fn sym_eigen_ascending<T: Real>(
    m: DMatrix<T>,
    what: &'static str,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let eps = lit::<T>(1e-12).max(T::EPSILON);
    let eig = SymmetricEigen::try_new(m, eps, MAX_SWEEPS).ok_or(Error::EigenFailure(what))?;
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let vectors = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure(what));
    }
    Ok((values, vectors))
}

/// `min|eig| / max|eig|` of a symmetric matrix; zero for the zero matrix.
pub fn sym_reciprocal_condition<T: Real>(m: &DMatrix<T>) -> Result<T> {
    if m.iter().any(|v| !v.is_finite()) {
        return Ok(T::zero());
    }
    let (vals, _) = sym_eigen_ascending(m.clone(), "reciprocal condition")?;
    let (lo, hi) = vals
        .iter()
        .fold((T::max_value().unwrap(), T::zero()), |(lo, hi), v| {
            (lo.min(v.abs()), hi.max(v.abs()))
        });
    if hi == T::zero() {
        return Ok(T::zero());
    }
    Ok(lo / hi)
}

/// `(A + Aᵀ)/2`.
pub fn symmetrize<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    (a + a.transpose()) * lit::<T>(0.5)
}
