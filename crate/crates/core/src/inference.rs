//! Confidence intervals, the joint Wald region and detection/attribution
//! verdicts for the fitted scaling factors.

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::linalg::sym_reciprocal_condition;
use crate::scalar::{count, lit, to_f64, Real};
use crate::variance::{LambdaCurve, XiEstimate};

const RCOND_MIN: f64 = 1e-10;

/// Detection: interval strictly above zero. Attribution: detected and the
/// interval contains one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub detected: bool,
    pub attributed: bool,
}

/// Outcome of the joint region membership test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointRegionTest<T: Real> {
    /// `N (β̂ - β₀)ᵀ Ξ̂⁻¹ (β̂ - β₀)`
    pub statistic: T,
    /// `χ²_p(1 - α)`
    pub threshold: T,
    pub inside: bool,
}

/// Estimate at `λ̂_opt` with per-forcing inference.
#[derive(Debug, Clone)]
pub struct FitResult<T: Real> {
    pub beta_hat: DVector<T>,
    pub lambda_opt: T,
    pub xi_hat: DMatrix<T>,
    pub n_dim: usize,
    pub m_runs: usize,
    pub tau_bar: T,
    pub alpha: f64,
    /// `(lower, upper)` per forcing.
    pub intervals: Vec<(T, T)>,
    pub verdicts: Vec<Verdict>,
    pub curve: LambdaCurve<T>,
    pub estimate: XiEstimate<T>,
    /// Validation warnings carried over from the dataset.
    pub warnings: Vec<String>,
}

impl<T: Real> FitResult<T> {
    /// Joint region test of `β₀` at the fit's `α`.
    pub fn joint_test(&self, beta0: &DVector<T>) -> Result<JointRegionTest<T>> {
        joint_region_test(beta0, &self.beta_hat, &self.xi_hat, self.n_dim, self.alpha)
    }
}

/// `β̂ᵢ ± z_{1-α/2} √(Ξ̂ᵢᵢ/N)`.
pub fn marginal_ci<T: Real>(beta_i: T, xi_ii: T, n_dim: usize, alpha: f64) -> Result<(T, T)> {
    if !(xi_ii > T::zero()) {
        return Err(Error::NonpositiveVariance(to_f64(xi_ii)));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::OutOfDomain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let z = lit::<T>(quantile_normal(1.0 - alpha / 2.0)?);
    let half = z * (xi_ii / count::<T>(n_dim)).sqrt();
    Ok((beta_i - half, beta_i + half))
}

/// Wald test of `β₀` against the joint region centered at `β̂`.
pub fn joint_region_test<T: Real>(
    beta0: &DVector<T>,
    beta_hat: &DVector<T>,
    xi_hat: &DMatrix<T>,
    n_dim: usize,
    alpha: f64,
) -> Result<JointRegionTest<T>> {
    let p = beta_hat.len();
    if beta0.len() != p || xi_hat.nrows() != p || xi_hat.ncols() != p {
        return Err(Error::DimensionMismatch(format!(
            "beta0 has {} entries, beta_hat {p}, xi_hat is {}x{}",
            beta0.len(),
            xi_hat.nrows(),
            xi_hat.ncols()
        )));
    }
    let rcond = sym_reciprocal_condition(xi_hat)?;
    if !(rcond >= lit(RCOND_MIN)) {
        return Err(Error::SingularXi { rcond: to_f64(rcond) });
    }
    let diff = beta_hat - beta0;
    let solved = xi_hat
        .clone()
        .lu()
        .solve(&diff)
        .ok_or(Error::SingularXi { rcond: to_f64(rcond) })?;
    let statistic = count::<T>(n_dim) * diff.dot(&solved);
    let threshold = lit::<T>(quantile_chisq(p, 1.0 - alpha)?);
    Ok(JointRegionTest {
        statistic,
        threshold,
        inside: statistic <= threshold,
    })
}

pub fn da_verdict<T: Real>(ci: (T, T)) -> Verdict {
    let (lower, upper) = ci;
    let detected = lower > T::zero();
    Verdict {
        detected,
        attributed: detected && lower <= T::one() && T::one() <= upper,
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Rational approximation of the standard normal quantile (Acklam), relative
/// error about 1e-9 before refinement.
fn acklam(q: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.38357751867269e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549671010584304,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const LOW: f64 = 0.02425;
    let tail = |r: f64| {
        (((((C[0] * r + C[1]) * r + C[2]) * r + C[3]) * r + C[4]) * r + C[5])
            / ((((D[0] * r + D[1]) * r + D[2]) * r + D[3]) * r + 1.0)
    };
    if q < LOW {
        tail((-2.0 * q.ln()).sqrt())
    } else if q > 1.0 - LOW {
        -tail((-2.0 * (1.0 - q).ln()).sqrt())
    } else {
        let r = q - 0.5;
        let s = r * r;
        (((((A[0] * s + A[1]) * s + A[2]) * s + A[3]) * s + A[4]) * s + A[5]) * r
            / (((((B[0] * s + B[1]) * s + B[2]) * s + B[3]) * s + B[4]) * s + 1.0)
    }
}

/// Inverse standard normal CDF.
pub fn quantile_normal(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::OutOfDomain(format!("normal quantile level {q} not in (0, 1)")));
    }
    if q == 0.5 {
        return Ok(0.0);
    }
    if q > 0.5 {
        return quantile_normal(1.0 - q).map(|x| -x);
    }
    let x = acklam(q);
    // One Halley step on Φ(x) - q.
    let e = normal_cdf(x) - q;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// Inverse CDF of the χ² distribution with `df` degrees of freedom.
pub fn quantile_chisq(df: usize, q: f64) -> Result<f64> {
    if df == 0 {
        return Err(Error::OutOfDomain("chi-square degrees of freedom must be >= 1".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::OutOfDomain(format!("chi-square quantile level {q} not in (0, 1)")));
    }
    let k = df as f64;
    let a = 0.5 * k;
    if df == 2 {
        return Ok(-2.0 * (1.0 - q).ln());
    }
    // Wilson-Hilferty start.
    let z = quantile_normal(q)?;
    let h = 2.0 / (9.0 * k);
    let mut x = (k * (1.0 - h + z * h.sqrt()).powi(3)).max(1e-8);

    let cdf = |x: f64| gamma_lr(a, 0.5 * x);
    let log_norm = a * std::f64::consts::LN_2 + ln_gamma(a);
    let pdf = |x: f64| ((a - 1.0) * x.ln() - 0.5 * x - log_norm).exp();

    // Bracket, then safeguarded Newton.
    let (mut lo, mut hi) = (0.0, x.max(1.0));
    while cdf(hi) < q {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let f = cdf(x) - q;
        if f.abs() < 1e-15 {
            break;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let step = f / pdf(x);
        let mut next = x - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.max(1.0) {
            x = next;
            break;
        }
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

    #[test]
    fn normal_quantiles() {
        assert_abs_diff_eq!(quantile_normal(0.975).unwrap(), 1.959963984540054, epsilon = 1e-9);
        assert_eq!(quantile_normal(0.5).unwrap(), 0.0);
        assert!(quantile_normal(0.0).is_err());
        assert!(quantile_normal(1.0).is_err());
        let oracle = Normal::new(0.0, 1.0).unwrap();
        for q in [1e-10, 1e-4, 0.01, 0.02425, 0.1, 0.3, 0.7, 0.9, 0.99, 0.9999] {
            let x = quantile_normal(q).unwrap();
            assert!((x - oracle.inverse_cdf(q)).abs() < 1e-8, "q = {q}");
            if q >= 1e-4 {
                assert!((x + quantile_normal(1.0 - q).unwrap()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn chisq_quantiles() {
        assert_abs_diff_eq!(quantile_chisq(2, 0.95).unwrap(), 5.991464547107979, epsilon = 1e-12);
        for q in [0.5, 0.9, 0.95, 0.99] {
            // χ²₁ = z² of the two-sided normal quantile.
            let z = quantile_normal(0.5 + q / 2.0).unwrap();
            assert!((quantile_chisq(1, q).unwrap() - z * z).abs() < 1e-8);
        }
        for df in [3usize, 4, 7, 20] {
            let oracle = ChiSquared::new(df as f64).unwrap();
            for q in [0.05, 0.5, 0.95, 0.999] {
                let x = quantile_chisq(df, q).unwrap();
                assert!((oracle.cdf(x) - q).abs() < 1e-10, "df {df} q {q}");
            }
        }
        assert!(quantile_chisq(0, 0.5).is_err());
        assert!(quantile_chisq(2, 1.0).is_err());
    }

    #[test]
    fn marginal_ci_examples() {
        let (lo, hi) = marginal_ci(1.0, 4.0, 100, 0.05).unwrap();
        assert_abs_diff_eq!(lo, 0.608007, epsilon = 1e-6);
        assert_abs_diff_eq!(hi, 1.391993, epsilon = 1e-6);

        // α with z = 1
        let alpha = 2.0 * (1.0 - Normal::new(0.0, 1.0).unwrap().cdf(1.0));
        assert_abs_diff_eq!(alpha, 0.317311, epsilon = 1e-6);
        let (lo, hi) = marginal_ci(0.0, 1.0, 1, alpha).unwrap();
        assert_abs_diff_eq!(lo, -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(hi, 1.0, epsilon = 1e-9);

        let (a, b) = marginal_ci(0.3, 2.0, 50, 0.1).unwrap();
        let (c, d) = marginal_ci(0.3, 8.0, 50, 0.1).unwrap();
        assert_abs_diff_eq!(d - c, 2.0 * (b - a), epsilon = 1e-14);
        assert_abs_diff_eq!((a + b) / 2.0, 0.3, epsilon = 1e-15);

        assert!(matches!(marginal_ci(0.0, 0.0, 10, 0.05), Err(Error::NonpositiveVariance(_))));
        assert!(marginal_ci(0.0, 1.0, 10, 1.5).is_err());
    }

    #[test]
    fn intervals_nest_in_alpha() {
        let mut prev: Option<(f64, f64)> = None;
        for alpha in [0.01, 0.05, 0.1, 0.32, 0.5] {
            let ci = marginal_ci(0.7, 1.3, 40, alpha).unwrap();
            if let Some(p) = prev {
                assert!(p.0 <= ci.0 && ci.1 <= p.1);
            }
            prev = Some(ci);
        }
    }

    #[test]
    fn joint_region_examples() {
        let xi = dmatrix![2.0, 0.3; 0.3, 1.0];
        let b = dvector![0.9, 1.2];
        let t = joint_region_test(&b, &b, &xi, 48, 0.05).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert!(t.inside);

        let t = joint_region_test(&dvector![0.0, 0.0], &dvector![1.0, 1.0], &DMatrix::identity(2, 2), 4, 0.05).unwrap();
        assert_abs_diff_eq!(t.statistic, 8.0, epsilon = 1e-14);
        assert_abs_diff_eq!(t.threshold, 5.991465, epsilon = 1e-6);
        assert!(!t.inside);

        assert!(matches!(
            joint_region_test(&b, &b, &dmatrix![1.0, 1.0; 1.0, 1.0], 10, 0.05),
            Err(Error::SingularXi { .. })
        ));
    }

    #[test]
    fn joint_region_agrees_with_marginal_when_scalar() {
        let (beta, xi, n, alpha) = (1.1, 3.0, 30, 0.05);
        let (lo, hi) = marginal_ci(beta, xi, n, alpha).unwrap();
        for k in 0..=200 {
            let b0 = 0.0 + 0.011 * k as f64;
            let t = joint_region_test(&dvector![b0], &dvector![beta], &dmatrix![xi], n, alpha).unwrap();
            let within = lo <= b0 && b0 <= hi;
            // Skip points within round-off of the boundary.
            if (b0 - lo).abs() > 1e-9 && (b0 - hi).abs() > 1e-9 {
                assert_eq!(t.inside, within, "b0 = {b0}");
            }
        }
    }

    #[test]
    fn verdicts() {
        assert_eq!(da_verdict((0.2, 1.5)), Verdict { detected: true, attributed: true });
        assert_eq!(da_verdict((-0.1, 0.5)), Verdict { detected: false, attributed: false });
        assert_eq!(da_verdict((0.3, 0.9)), Verdict { detected: true, attributed: false });
        assert_eq!(da_verdict((-0.5, 1.5)), Verdict { detected: false, attributed: false });
    }
}
