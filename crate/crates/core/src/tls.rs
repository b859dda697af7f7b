//! Prewhitened total least squares for the scaling factors.
//!
//! With `X̃* = X̃D^{-1/2}` every fingerprint column carries noise of the same
//! covariance as `Y`, so the estimator
//!
//! ```text
//! β̂(λ) = argmin ‖Σ̂^{-1/2}(λ)(Y - X̃β)‖² / (1 + βᵀDβ)
//! ```
//!
//! becomes a Rayleigh quotient in `(β*, -1)` with `β* = D^{1/2}β`. Its
//! minimizer is read off the eigenvector of the smallest eigenvalue of the
//! `(p+1)×(p+1)` whitened Gram matrix of `[X̃*, Y]`.

use nalgebra::DVector;

use crate::dataset::d_diag;
use crate::error::{Error, Result};
use crate::linalg::sym_eigen_ascending;
use crate::scalar::{count, lit, to_f64, Real};
use crate::spectral::SpectralCache;

const VERTICAL_TOL: f64 = 1e-10;
const GAP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TlsSolution<T: Real> {
    pub beta_hat: DVector<T>,
    /// Estimate in the reparameterized scale, `β̂* = D^{1/2}β̂`.
    pub beta_star: DVector<T>,
    /// Smallest eigenvalue of the whitened Gram matrix; equals the objective at `β̂`.
    pub min_eigenvalue: T,
    /// Second-smallest minus smallest eigenvalue.
    pub gap: T,
    /// Set when the gap is too small for the minimizer to be numerically unique.
    pub near_degenerate: bool,
}

/// Solves the TLS problem at `λ` using the spectral cache.
pub fn tls_fit<T: Real>(cache: &SpectralCache<T>, ensemble_sizes: &[usize], lambda: T) -> Result<TlsSolution<T>> {
    let p = cache.n_forcings();
    if ensemble_sizes.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "{p} forcings but {} ensemble sizes",
            ensemble_sizes.len()
        )));
    }
    if p == 0 {
        return Err(Error::InvalidInput("at least one forcing is required".into()));
    }
    if !(lambda > T::zero()) {
        return Err(Error::OutOfDomain(format!("lambda must be > 0, got {}", to_f64(lambda))));
    }
    // D^{-1/2} = diag(√nᵢ)
    let root_n = DVector::from_iterator(p, ensemble_sizes.iter().map(|&n| count::<T>(n).sqrt()));
    let gram = cache.whitened_gram(lambda, &root_n);
    let trace = gram.trace();
    let (vals, vecs) = sym_eigen_ascending(gram, "TLS Gram matrix")?;

    let v = vecs.column(0);
    let last = v[p];
    if !(last.abs() >= lit::<T>(VERTICAL_TOL) * v.norm()) {
        return Err(Error::VerticalSolution {
            lambda: to_f64(lambda),
            component: to_f64(last),
        });
    }
    let beta_star = DVector::from_iterator(p, (0..p).map(|i| -v[i] / last));
    let beta_hat = beta_star.component_mul(&root_n);

    let min_eigenvalue = vals[0].max(T::zero());
    let gap = (vals[1] - vals[0]).max(T::zero());
    let near_degenerate = gap < lit::<T>(GAP_TOL) * trace / count::<T>(p + 1);
    Ok(TlsSolution {
        beta_hat,
        beta_star,
        min_eigenvalue,
        gap,
        near_degenerate,
    })
}

/// `‖Σ̂^{-1/2}(λ)(Y - X̃β)‖² / (1 + βᵀDβ)`.
pub fn tls_objective<T: Real>(
    cache: &SpectralCache<T>,
    ensemble_sizes: &[usize],
    lambda: T,
    beta: &DVector<T>,
) -> T {
    let d = d_diag::<T>(ensemble_sizes);
    let penalty = beta
        .iter()
        .zip(d.iter())
        .fold(T::one(), |acc, (&b, &di)| acc + di * b * b);
    cache.whitened_residual_norm_sq(lambda, beta) / penalty
}
