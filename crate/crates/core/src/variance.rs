//! Plug-in asymptotic covariance of `β̂(λ)` and selection of `λ`.
//!
//! For each `λ` the bias-corrected estimates
//!
//! ```text
//! Δ̂₁ = G₁ - Θ₁D
//! Δ̂₂ = (1 + (N/m)Θ₁)² (G₁ - λG₂) - Θ₂D
//! K̂  = Θ₂
//! Ξ̂  = (1 + β̂ᵀDβ̂) Δ̂₁⁻¹ {Δ̂₂ + K̂ (D⁻¹ + β̂β̂ᵀ)⁻¹} Δ̂₁⁻¹
//! ```
//!
//! are assembled from the spectral functionals, with `β̂ = β̂(λ)` at the same
//! `λ`. `tr Ξ̂(λ)` estimates `N·E‖β̂(λ) - β‖²`, and `λ̂_opt` minimizes it over
//! a log-spaced grid, by default on `[0.01τ̄, 10τ̄]`.

use nalgebra::{DMatrix, DVector};

use crate::dataset::{d_diag, validate_dataset, DetectionDataset};
use crate::error::{Error, Result};
use crate::inference::{da_verdict, marginal_ci, FitResult};
use crate::linalg::{sym_eigen_ascending, sym_reciprocal_condition, symmetrize};
use crate::scalar::{count, lit, to_f64, Real};
use crate::spectral::{build_cache, RmtFunctionals, SpectralCache};
use crate::tls::tls_fit;

const RCOND_MIN: f64 = 1e-10;

pub const DEFAULT_GRID_SIZE: usize = 100;
pub const DEFAULT_LOWER_FACTOR: f64 = 0.01;
pub const DEFAULT_UPPER_FACTOR: f64 = 10.0;

/// `Δ̂₁ = G₁ - Θ₁D`, with `D` given by its diagonal.
pub fn delta1_hat<T: Real>(f: &RmtFunctionals<T>, d: &DVector<T>) -> DMatrix<T> {
    let mut out = f.g1.clone();
    for i in 0..d.len() {
        out[(i, i)] -= f.theta1 * d[i];
    }
    out
}

/// `Δ̂₂ = (1 + (N/m)Θ₁)²(G₁ - λG₂) - Θ₂D`.
pub fn delta2_hat<T: Real>(f: &RmtFunctionals<T>, d: &DVector<T>, n_dim: usize, m_runs: usize) -> DMatrix<T> {
    let ratio = count::<T>(n_dim) / count::<T>(m_runs);
    let inflate = T::one() + ratio * f.theta1;
    let mut out = (&f.g1 - &f.g2 * f.lambda) * (inflate * inflate);
    for i in 0..d.len() {
        out[(i, i)] -= f.theta2 * d[i];
    }
    out
}

/// `K̂ = Θ₂`.
pub fn k_hat<T: Real>(f: &RmtFunctionals<T>) -> T {
    f.theta2
}

/// Assembles `Ξ̂` from its ingredients; the result is symmetrized.
pub fn xi_hat<T: Real>(
    beta_hat: &DVector<T>,
    d: &DVector<T>,
    delta1: &DMatrix<T>,
    delta2: &DMatrix<T>,
    k: T,
) -> Result<DMatrix<T>> {
    let p = beta_hat.len();
    if d.iter().any(|&v| !(v > T::zero())) {
        return Err(Error::InvalidInput("D must have positive diagonal".into()));
    }
    let rcond = sym_reciprocal_condition(delta1)?;
    if !(rcond >= lit(RCOND_MIN)) {
        return Err(Error::SingularDelta1 { rcond: to_f64(rcond) });
    }
    let delta1_inv = delta1
        .clone()
        .try_inverse()
        .ok_or(Error::SingularDelta1 { rcond: to_f64(rcond) })?;

    let mut shaped = beta_hat * beta_hat.transpose();
    for i in 0..p {
        shaped[(i, i)] += T::one() / d[i];
    }
    // D⁻¹ + ββᵀ is SPD.
    let shaped_inv = shaped
        .cholesky()
        .ok_or(Error::Singular("D^-1 + beta beta^T"))?
        .inverse();

    let scale = T::one() + beta_hat.iter().zip(d.iter()).fold(T::zero(), |a, (&b, &di)| a + di * b * b);
    let middle = delta2 + shaped_inv * k;
    let xi = (&delta1_inv * middle * &delta1_inv) * scale;
    Ok(symmetrize(&xi))
}

/// Scalar summary of `Ξ̂` minimized over the `λ` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionCriterion {
    /// `tr Ξ̂`, the asymptotic MSE.
    #[default]
    Trace,
    Determinant,
    MaxEigenvalue,
}

impl SelectionCriterion {
    fn score<T: Real>(self, xi: &DMatrix<T>) -> Result<T> {
        Ok(match self {
            SelectionCriterion::Trace => xi.trace(),
            SelectionCriterion::Determinant => xi.determinant(),
            SelectionCriterion::MaxEigenvalue => {
                let (vals, _) = sym_eigen_ascending(xi.clone(), "xi")?;
                vals[vals.len() - 1]
            }
        })
    }
}

/// `Ξ̂` and its ingredients at one `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct XiEstimate<T: Real> {
    pub lambda: T,
    pub beta_hat: DVector<T>,
    pub delta1_hat: DMatrix<T>,
    pub delta2_hat: DMatrix<T>,
    pub k_hat: T,
    pub xi_hat: DMatrix<T>,
    pub trace_xi: T,
    /// All diagonal entries of `Ξ̂` are positive and finite.
    pub feasible: bool,
    pub tls_min_eigenvalue: T,
    pub tls_near_degenerate: bool,
    /// `1 - (N/m)(1 - λQ₁)`
    pub denominator: T,
}

/// TLS fit plus plug-in covariance at a single `λ`.
///
/// A vertical TLS solution, a degenerate `Θ` denominator or a singular `Δ̂₁`
/// is returned as an error; a finite `Ξ̂` with a nonpositive diagonal comes
/// back with `feasible == false`.
pub fn evaluate_lambda<T: Real>(cache: &SpectralCache<T>, ensemble_sizes: &[usize], lambda: T) -> Result<XiEstimate<T>> {
    let sol = tls_fit(cache, ensemble_sizes, lambda)?;
    let f = cache.functionals(lambda)?;
    let d = d_diag::<T>(ensemble_sizes);
    let delta1 = delta1_hat(&f, &d);
    let delta2 = delta2_hat(&f, &d, cache.n_dim(), cache.m_runs());
    let k = k_hat(&f);
    let xi = xi_hat(&sol.beta_hat, &d, &delta1, &delta2, k)?;
    let feasible = xi.iter().all(|v| v.is_finite()) && xi.diagonal().iter().all(|&v| v > T::zero());
    Ok(XiEstimate {
        lambda,
        beta_hat: sol.beta_hat,
        delta1_hat: delta1,
        delta2_hat: delta2,
        k_hat: k,
        trace_xi: xi.trace(),
        xi_hat: xi,
        feasible,
        tls_min_eigenvalue: sol.min_eigenvalue,
        tls_near_degenerate: sol.near_degenerate,
        denominator: f.denominator,
    })
}

/// `n` log-spaced points from `lo` to `hi`, both endpoints exact.
pub fn log_grid<T: Real>(lo: T, hi: T, n: usize) -> Vec<T> {
    if n == 1 {
        return vec![lo];
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| {
            if k == 0 {
                lo
            } else if k == n - 1 {
                hi
            } else {
                let t = count::<T>(k) / count::<T>(n - 1);
                (llo + (lhi - llo) * t).exp()
            }
        })
        .collect()
}

/// Index of the smallest feasible objective; ties go to the lowest index.
pub fn argmin_feasible<T: Real>(objectives: &[Option<T>]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in objectives.iter().enumerate() {
        if let Some(v) = *v {
            match best {
                Some((_, b)) if !(v < b) => {}
                _ => best = Some((i, v)),
            }
        }
    }
    best.map(|(i, _)| i)
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint<T: Real> {
    pub lambda: T,
    /// Criterion value, `None` when infeasible.
    pub objective: Option<T>,
    pub trace_xi: Option<T>,
    /// Why the point is infeasible.
    pub failure: Option<String>,
}

/// Objective over the `λ` grid and the selected index.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaCurve<T: Real> {
    pub points: Vec<CurvePoint<T>>,
    pub chosen_index: usize,
    pub criterion: SelectionCriterion,
}

impl<T: Real> LambdaCurve<T> {
    pub fn grid(&self) -> Vec<T> {
        self.points.iter().map(|p| p.lambda).collect()
    }

    pub fn objectives(&self) -> Vec<Option<T>> {
        self.points.iter().map(|p| p.objective).collect()
    }

    pub fn lambda_opt(&self) -> T {
        self.points[self.chosen_index].lambda
    }

    pub fn lower(&self) -> T {
        self.points[0].lambda
    }

    pub fn upper(&self) -> T {
        self.points[self.points.len() - 1].lambda
    }

    /// Builds a curve from already computed objectives.
    pub fn from_objectives(
        grid: &[T],
        objectives: &[Option<T>],
        criterion: SelectionCriterion,
    ) -> Result<Self> {
        let chosen_index = argmin_feasible(objectives).ok_or(Error::NoFeasiblePoint { grid_size: grid.len() })?;
        let points = grid
            .iter()
            .zip(objectives)
            .map(|(&lambda, &objective)| CurvePoint {
                lambda,
                objective,
                trace_xi: objective.filter(|_| criterion == SelectionCriterion::Trace),
                failure: objective.is_none().then(|| "infeasible".to_string()),
            })
            .collect();
        Ok(Self {
            points,
            chosen_index,
            criterion,
        })
    }
}

fn evaluate_point<T: Real>(
    cache: &SpectralCache<T>,
    ensemble_sizes: &[usize],
    lambda: T,
    criterion: SelectionCriterion,
) -> CurvePoint<T> {
    let outcome = evaluate_lambda(cache, ensemble_sizes, lambda).and_then(|est| {
        if !est.feasible {
            return Ok((est.trace_xi, None, Some("nonpositive diagonal in xi_hat".to_string())));
        }
        let score = criterion.score(&est.xi_hat)?;
        if score.is_finite() {
            Ok((est.trace_xi, Some(score), None))
        } else {
            Ok((est.trace_xi, None, Some("non-finite objective".to_string())))
        }
    });
    match outcome {
        Ok((trace, objective, failure)) => CurvePoint {
            lambda,
            objective,
            trace_xi: Some(trace).filter(|t| t.is_finite()),
            failure,
        },
        Err(e) => CurvePoint {
            lambda,
            objective: None,
            trace_xi: None,
            failure: Some(e.to_string()),
        },
    }
}

/// Evaluates the criterion on a log-spaced grid over `bounds` and picks the
/// feasible minimizer (smallest `λ` on ties).
pub fn select_lambda<T: Real>(
    cache: &SpectralCache<T>,
    ensemble_sizes: &[usize],
    bounds: (T, T),
    grid_size: usize,
    criterion: SelectionCriterion,
) -> Result<LambdaCurve<T>> {
    let (lo, hi) = bounds;
    if !(lo > T::zero() && lo < hi && hi.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "lambda bounds must satisfy 0 < lower < upper, got ({}, {})",
            to_f64(lo),
            to_f64(hi)
        )));
    }
    if grid_size < 2 {
        return Err(Error::InvalidInput("grid size must be at least 2".into()));
    }
    let points: Vec<CurvePoint<T>> = log_grid(lo, hi, grid_size)
        .into_iter()
        .map(|lambda| evaluate_point(cache, ensemble_sizes, lambda, criterion))
        .collect();
    let objectives: Vec<Option<T>> = points.iter().map(|p| p.objective).collect();
    let chosen_index = argmin_feasible(&objectives).ok_or(Error::NoFeasiblePoint { grid_size })?;
    Ok(LambdaCurve {
        points,
        chosen_index,
        criterion,
    })
}

/// Settings for [`fit_optimal`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub alpha: f64,
    /// Absolute search bounds; `None` means `[0.01τ̄, 10τ̄]`.
    pub lambda_bounds: Option<(f64, f64)>,
    pub grid_size: usize,
    pub criterion: SelectionCriterion,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            lambda_bounds: None,
            grid_size: DEFAULT_GRID_SIZE,
            criterion: SelectionCriterion::Trace,
        }
    }
}

/// Default search interval `[0.01τ̄, 10τ̄]`.
pub fn default_bounds<T: Real>(tau_bar: T) -> (T, T) {
    (tau_bar * lit(DEFAULT_LOWER_FACTOR), tau_bar * lit(DEFAULT_UPPER_FACTOR))
}

/// Validates the dataset, selects `λ̂_opt`, and returns the estimate with
/// marginal intervals and detection/attribution verdicts.
pub fn fit_optimal<T: Real>(ds: &DetectionDataset<T>, options: &FitOptions) -> Result<FitResult<T>> {
    let validation = validate_dataset(ds)?;
    let s = ds.sample_covariance()?;
    let cache = build_cache(&s, &ds.x_tilde, &ds.y)?;
    fit_with_cache(&cache, &ds.ensemble_sizes, options, validation.warnings.iter().map(|w| w.to_string()).collect())
}

/// [`fit_optimal`] on an existing spectral cache.
pub fn fit_with_cache<T: Real>(
    cache: &SpectralCache<T>,
    ensemble_sizes: &[usize],
    options: &FitOptions,
    warnings: Vec<String>,
) -> Result<FitResult<T>> {
    if !(options.alpha > 0.0 && options.alpha < 1.0) {
        return Err(Error::OutOfDomain(format!("alpha must lie in (0, 1), got {}", options.alpha)));
    }
    let tau_bar = cache.tau_bar();
    let bounds = match options.lambda_bounds {
        Some((lo, hi)) => (lit::<T>(lo), lit::<T>(hi)),
        None => {
            if !(tau_bar > T::zero()) {
                return Err(Error::InvalidInput(
                    "sample covariance has zero trace; give explicit lambda bounds".into(),
                ));
            }
            default_bounds(tau_bar)
        }
    };
    let curve = select_lambda(cache, ensemble_sizes, bounds, options.grid_size, options.criterion)?;
    let lambda_opt = curve.lambda_opt();
    let estimate = evaluate_lambda(cache, ensemble_sizes, lambda_opt)?;

    let n = cache.n_dim();
    let mut intervals = Vec::with_capacity(estimate.beta_hat.len());
    let mut verdicts = Vec::with_capacity(estimate.beta_hat.len());
    for i in 0..estimate.beta_hat.len() {
        let ci = marginal_ci(estimate.beta_hat[i], estimate.xi_hat[(i, i)], n, options.alpha)?;
        verdicts.push(da_verdict(ci));
        intervals.push(ci);
    }
    Ok(FitResult {
        beta_hat: estimate.beta_hat.clone(),
        lambda_opt,
        xi_hat: estimate.xi_hat.clone(),
        n_dim: n,
        m_runs: cache.m_runs(),
        tau_bar,
        alpha: options.alpha,
        intervals,
        verdicts,
        curve,
        estimate,
        warnings,
    })
}
