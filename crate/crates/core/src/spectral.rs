//! Spectral cache of the sample covariance and the trace/quadratic
//! functionals of the shrinkage weight `Σ̂(λ) = S + λI`.
//!
//! `S` is decomposed once as `U diag(d) Uᵀ`. The fingerprints and the
//! observations are rotated into the eigenbasis (`V = UᵀX̃`, `u = UᵀY`), after
//! which every functional at a given `λ` is a weighted sum over the spectrum
//! costing `O(p²N)`. `Σ̂(λ)` is never formed or inverted.
//!
//! `Q₁` and `Q₂` lose accuracy when `N > m` and `λ` approaches zero, since
//! `Σ̂(λ)` is then nearly singular. Nothing here guards against that; keep the
//! search lower bound away from zero and watch [`RmtFunctionals::denominator`].

use nalgebra::{DMatrix, DVector};

use crate::dataset::SampleCovariance;
use crate::error::{Error, Result};
use crate::linalg::sym_eigen_ascending;
use crate::scalar::{count, lit, to_f64, Real};

/// Relative threshold below which eigenvalues are treated as round-off.
const CLAMP_REL: f64 = 1e-10;
/// `|1 - (N/m)(1 - λQ₁)|` at or below this is degenerate.
const DENOM_TOL: f64 = 1e-12;

/// Eigendecomposition of `S` plus the data projected onto its eigenvectors.
#[derive(Debug, Clone)]
pub struct SpectralCache<T: Real> {
    eigvals: DVector<T>,
    eigvecs: DMatrix<T>,
    proj_x: DMatrix<T>,
    proj_y: DVector<T>,
    n_dim: usize,
    m_runs: usize,
    tau_bar: T,
}

/// The six functionals entering the plug-in covariance, at one `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmtFunctionals<T: Real> {
    pub lambda: T,
    /// `(1/N) tr Σ̂⁻¹(λ)`
    pub q1: T,
    /// `(1/N) tr Σ̂⁻²(λ)`
    pub q2: T,
    pub theta1: T,
    pub theta2: T,
    /// `X̃ᵀΣ̂⁻¹(λ)X̃ / N`
    pub g1: DMatrix<T>,
    /// `X̃ᵀΣ̂⁻²(λ)X̃ / N`
    pub g2: DMatrix<T>,
    /// `b = 1 - (N/m)(1 - λQ₁)`, shared denominator of `Θ₁` and `Θ₂`.
    pub denominator: T,
}

/// Decomposes `S` and projects `x_tilde` and `y` onto its eigenbasis.
pub fn build_cache<T: Real>(
    s: &SampleCovariance<T>,
    x_tilde: &DMatrix<T>,
    y: &DVector<T>,
) -> Result<SpectralCache<T>> {
    let n = s.n_dim();
    if x_tilde.nrows() != n || y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "sample covariance is {n}x{n}, x_tilde has {} rows, y has length {}",
            x_tilde.nrows(),
            y.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty problem".into()));
    }
    let tau_bar = s.tau_bar();
    let (mut eigvals, eigvecs) = sym_eigen_ascending(s.s.clone(), "sample covariance")?;

    let clamp = tau_bar.abs() * lit(CLAMP_REL);
    for d in eigvals.iter_mut() {
        if *d < T::zero() {
            if -*d > clamp {
                return Err(Error::NotPsd(to_f64(*d)));
            }
            *d = T::zero();
        }
    }

    let ut = eigvecs.transpose();
    let proj_x = &ut * x_tilde;
    let proj_y = &ut * y;
    Ok(SpectralCache {
        eigvals,
        eigvecs,
        proj_x,
        proj_y,
        n_dim: n,
        m_runs: s.m,
        tau_bar,
    })
}

impl<T: Real> SpectralCache<T> {
    /// Eigenvalues of `S`, ascending and nonnegative.
    pub fn eigvals(&self) -> &DVector<T> {
        &self.eigvals
    }

    pub fn eigvecs(&self) -> &DMatrix<T> {
        &self.eigvecs
    }

    /// `V = UᵀX̃`
    pub fn proj_x(&self) -> &DMatrix<T> {
        &self.proj_x
    }

    /// `u = UᵀY`
    pub fn proj_y(&self) -> &DVector<T> {
        &self.proj_y
    }

    pub fn n_dim(&self) -> usize {
        self.n_dim
    }

    pub fn m_runs(&self) -> usize {
        self.m_runs
    }

    pub fn n_forcings(&self) -> usize {
        self.proj_x.ncols()
    }

    /// `τ̄ = tr(S)/N`
    pub fn tau_bar(&self) -> T {
        self.tau_bar
    }

    /// `N/m`
    pub fn aspect_ratio(&self) -> T {
        count::<T>(self.n_dim) / count::<T>(self.m_runs)
    }

    fn mean_over_spectrum(&self, f: impl Fn(T) -> T) -> T {
        self.eigvals.iter().fold(T::zero(), |acc, &d| acc + f(d)) / count(self.n_dim)
    }

    pub fn q1(&self, lambda: T) -> T {
        self.mean_over_spectrum(|d| T::one() / (d + lambda))
    }

    pub fn q2(&self, lambda: T) -> T {
        self.mean_over_spectrum(|d| {
            let r = T::one() / (d + lambda);
            r * r
        })
    }

    /// `1 - λQ₁(λ)`, summed as `(1/N) Σ dᵢ/(dᵢ+λ)` to avoid cancellation.
    fn one_minus_lambda_q1(&self, lambda: T) -> T {
        self.mean_over_spectrum(|d| d / (d + lambda))
    }

    /// `Q₁(λ) - λQ₂(λ)`, summed as `(1/N) Σ dᵢ/(dᵢ+λ)²`.
    fn q1_minus_lambda_q2(&self, lambda: T) -> T {
        self.mean_over_spectrum(|d| {
            let r = T::one() / (d + lambda);
            d * r * r
        })
    }

    /// `b(λ) = 1 - (N/m)(1 - λQ₁(λ))`.
    pub fn denominator(&self, lambda: T) -> T {
        T::one() - self.aspect_ratio() * self.one_minus_lambda_q1(lambda)
    }

    fn checked_denominator(&self, lambda: T) -> Result<T> {
        let b = self.denominator(lambda);
        if !(b.abs() > lit(DENOM_TOL)) {
            return Err(Error::DegenerateDenominator {
                lambda: to_f64(lambda),
                value: to_f64(b),
            });
        }
        Ok(b)
    }

    /// `Θ₁(λ) = (1 - λQ₁) / b`.
    pub fn theta1(&self, lambda: T) -> Result<T> {
        let b = self.checked_denominator(lambda)?;
        Ok(self.one_minus_lambda_q1(lambda) / b)
    }

    /// `Θ₂(λ) = (1 - λQ₁)/b³ - λ(Q₁ - λQ₂)/b⁴`.
    pub fn theta2(&self, lambda: T) -> Result<T> {
        let b = self.checked_denominator(lambda)?;
        let b3 = b * b * b;
        Ok(self.one_minus_lambda_q1(lambda) / b3 - lambda * self.q1_minus_lambda_q2(lambda) / (b3 * b))
    }

    /// `(G₁, G₂) = (X̃ᵀΣ̂⁻¹X̃/N, X̃ᵀΣ̂⁻²X̃/N)`.
    pub fn g_forms(&self, lambda: T) -> (DMatrix<T>, DMatrix<T>) {
        let p = self.proj_x.ncols();
        let mut g1 = DMatrix::zeros(p, p);
        let mut g2 = DMatrix::zeros(p, p);
        for (i, &d) in self.eigvals.iter().enumerate() {
            let w1 = T::one() / (d + lambda);
            let w2 = w1 * w1;
            for a in 0..p {
                let va = self.proj_x[(i, a)];
                for b in a..p {
                    let vv = va * self.proj_x[(i, b)];
                    g1[(a, b)] += w1 * vv;
                    g2[(a, b)] += w2 * vv;
                }
            }
        }
        let inv_n = T::one() / count::<T>(self.n_dim);
        for a in 0..p {
            for b in a..p {
                g1[(a, b)] *= inv_n;
                g2[(a, b)] *= inv_n;
                g1[(b, a)] = g1[(a, b)];
                g2[(b, a)] = g2[(a, b)];
            }
        }
        (g1, g2)
    }

    /// Applies `Σ̂(λ)^{-1/2}` to `a`.
    pub fn whiten(&self, lambda: T, a: &DVector<T>) -> DVector<T> {
        let mut c = self.eigvecs.tr_mul(a);
        for (ci, &d) in c.iter_mut().zip(self.eigvals.iter()) {
            *ci /= (d + lambda).sqrt();
        }
        &self.eigvecs * c
    }

    /// Gram matrix `[X̃·diag(scale), Y]ᵀ Σ̂⁻¹(λ) [X̃·diag(scale), Y]`, size `(p+1)×(p+1)`.
    pub fn whitened_gram(&self, lambda: T, col_scale: &DVector<T>) -> DMatrix<T> {
        let p = self.proj_x.ncols();
        let k = p + 1;
        let mut gram = DMatrix::zeros(k, k);
        let mut row = vec![T::zero(); k];
        for (i, &d) in self.eigvals.iter().enumerate() {
            let w = T::one() / (d + lambda);
            for a in 0..p {
                row[a] = self.proj_x[(i, a)] * col_scale[a];
            }
            row[p] = self.proj_y[i];
            for a in 0..k {
                let wa = w * row[a];
                for b in a..k {
                    gram[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        gram
    }

    /// `‖Σ̂^{-1/2}(λ)(Y - X̃β)‖²`
    pub fn whitened_residual_norm_sq(&self, lambda: T, beta: &DVector<T>) -> T {
        let r = &self.proj_y - &self.proj_x * beta;
        r.iter()
            .zip(self.eigvals.iter())
            .fold(T::zero(), |acc, (&ri, &d)| acc + ri * ri / (d + lambda))
    }

    /// All functionals at `λ`.
    pub fn functionals(&self, lambda: T) -> Result<RmtFunctionals<T>> {
        if !(lambda > T::zero()) {
            return Err(Error::OutOfDomain(format!("lambda must be > 0, got {}", to_f64(lambda))));
        }
        let theta1 = self.theta1(lambda)?;
        let theta2 = self.theta2(lambda)?;
        let (g1, g2) = self.g_forms(lambda);
        Ok(RmtFunctionals {
            lambda,
            q1: self.q1(lambda),
            q2: self.q2(lambda),
            theta1,
            theta2,
            g1,
            g2,
            denominator: self.denominator(lambda),
        })
    }
}
