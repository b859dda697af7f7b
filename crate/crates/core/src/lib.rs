//! Regularized optimal fingerprinting.
//!
//! Scaling factors `β` in `Y = Xβ + ε` are estimated by prewhitened total
//! least squares, with the noise covariance replaced by the linear shrinkage
//! `S + λI` of the control-run sample covariance `S`. The shrinkage `λ` is
//! picked by minimizing the trace of a bias-corrected plug-in estimate `Ξ̂` of
//! the asymptotic covariance of `√N(β̂ - β)`, which also yields confidence
//! intervals and detection/attribution verdicts.
//!
//! ```no_run
//! use finprint::{fit_optimal, io::load_dataset, FitOptions};
//!
//! let ds = load_dataset("data/manifest.json".as_ref())?;
//! let fit = fit_optimal(&ds, &FitOptions::default())?;
//! for (i, (lo, hi)) in fit.intervals.iter().enumerate() {
//!     println!("beta[{i}] = {:.3} [{lo:.3}, {hi:.3}]", fit.beta_hat[i]);
//! }
//! # Ok::<(), finprint::Error>(())
//! ```
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common case.

// NaN must fail the `!(x > 0)` style checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod scalar;
pub mod simulate;
pub mod spectral;
pub mod tls;
pub mod variance;

pub use dataset::{
    compute_sample_covariance, d_diag, ensemble_mean, validate_dataset, CovarianceSource, DetectionDataset,
    SampleCovariance, ValidationReport, ValidationWarning,
};
pub use error::{Error, Result};
pub use inference::{
    da_verdict, joint_region_test, marginal_ci, quantile_chisq, quantile_normal, FitResult, JointRegionTest, Verdict,
};
pub use scalar::Real;
pub use simulate::{
    build_sigma_st, gls_oracle, mp_stieltjes, run_scenario, sample_mvn, MpSolution, PopulationSpectrum, Simulation,
    SimulationReport, SimulationScenario,
};
pub use spectral::{build_cache, RmtFunctionals, SpectralCache};
pub use tls::{tls_fit, tls_objective, TlsSolution};
pub use variance::{
    delta1_hat, delta2_hat, evaluate_lambda, fit_optimal, fit_with_cache, k_hat, log_grid, select_lambda, xi_hat,
    FitOptions, LambdaCurve, SelectionCriterion, XiEstimate,
};

pub type DetectionDatasetF64 = DetectionDataset<f64>;
pub type DetectionDatasetF32 = DetectionDataset<f32>;
pub type SampleCovarianceF64 = SampleCovariance<f64>;
pub type SampleCovarianceF32 = SampleCovariance<f32>;
pub type SpectralCacheF64 = SpectralCache<f64>;
pub type SpectralCacheF32 = SpectralCache<f32>;
pub type TlsSolutionF64 = TlsSolution<f64>;
pub type TlsSolutionF32 = TlsSolution<f32>;
pub type XiEstimateF64 = XiEstimate<f64>;
pub type XiEstimateF32 = XiEstimate<f32>;
pub type LambdaCurveF64 = LambdaCurve<f64>;
pub type LambdaCurveF32 = LambdaCurve<f32>;
pub type FitResultF64 = FitResult<f64>;
pub type FitResultF32 = FitResult<f32>;
