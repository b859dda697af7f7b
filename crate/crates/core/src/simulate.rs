//! Monte Carlo coverage studies for the regularized TLS estimator.
//!
//! Replicates follow the errors-in-variables model
//!
//! ```text
//! Y   = γXβ + ε,        ε  ~ N(0, Σ)
//! X̃ᵢ  = γXᵢ + ηᵢ,       ηᵢ ~ N(0, Σ/nᵢ)
//! Zⱼ  ~ N(0, Σ),        j = 1..m
//! ```
//!
//! Every replicate draws from its own PRNG streams, derived from the base
//! seed, the replicate index and a stream tag, so serial and parallel runs
//! produce identical results.
//!
//! Also here: the separable AR(1) covariance builder, a seeded unstructured
//! covariance surrogate, the Marčenko–Pastur fixed point used as an oracle
//! for the spectral functionals, and a dense GLS baseline.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DetectionDataset;
use crate::error::{Error, Result};
use crate::linalg::sym_eigen_ascending;
use crate::scalar::{count, lit, to_f64, Real};
use crate::spectral::build_cache;
use crate::tls::tls_fit;
use crate::variance::{fit_with_cache, FitOptions};

/// Covariance of the internal variability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaModel {
    Identity,
    /// `diag(√v) (C_s ⊗ C_t) diag(√v)` with AR(1) correlations `ρ^{|i-j|}`.
    SeparableAr1 {
        spatial_dim: usize,
        temporal_dim: usize,
        rho_s: f64,
        rho_t: f64,
        /// Per-entry variances; unit variances when absent.
        #[serde(default)]
        variances: Option<Vec<f64>>,
    },
    /// Random orthogonal conjugation of a geometrically decaying spectrum
    /// with mean eigenvalue one.
    Unstructured {
        seed: u64,
        #[serde(default = "default_condition_number")]
        condition_number: f64,
    },
    UserMatrix { path: PathBuf },
}

fn default_condition_number() -> f64 {
    1e3
}

/// True (noise-free) fingerprints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FingerprintModel {
    /// Seeded standard-normal columns. Columns after the first are mixed with
    /// the first so that their population correlation is `correlation`.
    Synthetic {
        seed: u64,
        #[serde(default)]
        correlation: f64,
    },
    UserMatrix { path: PathBuf },
}

fn default_alpha() -> f64 {
    0.05
}

fn default_grid_size() -> usize {
    crate::variance::DEFAULT_GRID_SIZE
}

/// Generative configuration of a Monte Carlo study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScenario {
    #[serde(default)]
    pub name: Option<String>,
    pub n_dim: usize,
    pub true_beta: Vec<f64>,
    pub gamma: f64,
    pub ensemble_sizes: Vec<usize>,
    pub m_runs: usize,
    pub sigma_model: SigmaModel,
    pub true_x: FingerprintModel,
    pub replicates: usize,
    pub base_seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    /// Extra fixed `λ = c·τ̄` fits per replicate, for MSE comparisons.
    #[serde(default)]
    pub fixed_lambda_factors: Vec<f64>,
}

impl SimulationScenario {
    /// Reads a JSON scenario; relative matrix paths resolve against the
    /// scenario file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut scn: SimulationScenario = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let SigmaModel::UserMatrix { path } = &mut scn.sigma_model {
            resolve(path);
        }
        if let FingerprintModel::UserMatrix { path } = &mut scn.true_x {
            resolve(path);
        }
        Ok(scn)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.true_beta.len();
        if p == 0 {
            return Err(Error::InvalidInput("true_beta is empty".into()));
        }
        if self.ensemble_sizes.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "{p} scaling factors but {} ensemble sizes",
                self.ensemble_sizes.len()
            )));
        }
        if self.ensemble_sizes.contains(&0) {
            return Err(Error::InvalidInput("ensemble sizes must be >= 1".into()));
        }
        if self.n_dim < p + 1 {
            return Err(Error::InvalidInput(format!("need n_dim >= p+1, got {}", self.n_dim)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidInput(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.m_runs == 0 || self.replicates == 0 {
            return Err(Error::InvalidInput("m_runs and replicates must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::OutOfDomain(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.grid_size < 2 {
            return Err(Error::InvalidInput("grid_size must be >= 2".into()));
        }
        if self.true_beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("true_beta"));
        }
        if self.fixed_lambda_factors.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidInput("fixed lambda factors must be > 0".into()));
        }
        match &self.sigma_model {
            SigmaModel::SeparableAr1 {
                spatial_dim,
                temporal_dim,
                rho_s,
                rho_t,
                variances,
            } => {
                if spatial_dim * temporal_dim != self.n_dim {
                    return Err(Error::DimensionMismatch(format!(
                        "spatial_dim * temporal_dim = {} but n_dim = {}",
                        spatial_dim * temporal_dim,
                        self.n_dim
                    )));
                }
                for &r in [rho_s, rho_t] {
                    if !(r.abs() < 1.0) {
                        return Err(Error::InvalidCorrelation(r));
                    }
                }
                if let Some(v) = variances {
                    if v.len() != self.n_dim {
                        return Err(Error::DimensionMismatch(format!(
                            "{} variances for n_dim = {}",
                            v.len(),
                            self.n_dim
                        )));
                    }
                }
            }
            SigmaModel::Unstructured { condition_number, .. } => {
                if !(*condition_number >= 1.0 && condition_number.is_finite()) {
                    return Err(Error::InvalidInput("condition_number must be >= 1".into()));
                }
            }
            SigmaModel::Identity | SigmaModel::UserMatrix { .. } => {}
        }
        if let FingerprintModel::Synthetic { correlation, .. } = &self.true_x {
            if !(correlation.abs() < 1.0) {
                return Err(Error::InvalidCorrelation(*correlation));
            }
        }
        Ok(())
    }
}

/// AR(1) correlation matrix `ρ^{|i-j|}`.
fn ar1_correlation<T: Real>(dim: usize, rho: T) -> DMatrix<T> {
    DMatrix::from_fn(dim, dim, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Separable spatio-temporal covariance; index `s·T + t` for location `s`, time `t`.
pub fn build_sigma_st<T: Real>(
    spatial_dim: usize,
    temporal_dim: usize,
    rho_s: T,
    rho_t: T,
    variances: &DVector<T>,
) -> Result<DMatrix<T>> {
    for r in [rho_s, rho_t] {
        if !(r.abs() < T::one()) {
            return Err(Error::InvalidCorrelation(to_f64(r)));
        }
    }
    let n = spatial_dim * temporal_dim;
    if variances.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} variances for {spatial_dim}x{temporal_dim} grid",
            variances.len()
        )));
    }
    if variances.iter().any(|&v| !(v > T::zero() && v.is_finite())) {
        return Err(Error::InvalidInput("variances must be positive".into()));
    }
    let cs = ar1_correlation(spatial_dim, rho_s);
    let ct = ar1_correlation(temporal_dim, rho_t);
    let corr = cs.kronecker(&ct);
    let sd = variances.map(|v| v.sqrt());
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            variances[i] * corr[(i, i)]
        } else {
            (sd[i] * sd[j]) * corr[(i, j)]
        }
    }))
}

/// Seeded SPD surrogate: `Q diag(τ) Qᵀ` with `Q` Haar-orthogonal and `τ`
/// geometric from 1 down to `1/condition_number`, rescaled to mean one.
pub fn build_sigma_unstructured<T: Real>(n: usize, condition_number: f64, seed: u64) -> DMatrix<T>
where
    StandardNormal: Distribution<T>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<T>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < T::zero() {
            q.column_mut(j).neg_mut();
        }
    }
    let raw: Vec<f64> = (0..n)
        .map(|k| {
            let t = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
            condition_number.powf(-t)
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let spectrum = DVector::from_iterator(n, raw.iter().map(|&v| lit::<T>(v / mean)));
    let sigma = &q * DMatrix::from_diagonal(&spectrum) * q.transpose();
    crate::linalg::symmetrize(&sigma)
}

#[derive(Debug, Clone)]
enum Root<T: Real> {
    Diagonal(DVector<T>),
    Dense(DMatrix<T>),
}

/// Draws `N(0, Σ)` vectors through the symmetric square root of `Σ`.
#[derive(Debug, Clone)]
pub struct MvnSampler<T: Real> {
    root: Root<T>,
}

impl<T: Real> MvnSampler<T>
where
    StandardNormal: Distribution<T>,
{
    pub fn new(sigma: &DMatrix<T>) -> Result<Self> {
        if !sigma.is_square() {
            return Err(Error::DimensionMismatch("covariance must be square".into()));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance"));
        }
        let n = sigma.nrows();
        let is_diagonal = (0..n).all(|i| (0..n).all(|j| i == j || sigma[(i, j)] == T::zero()));
        if is_diagonal {
            let d = sigma.diagonal();
            if let Some(&v) = d.iter().find(|&&v| v < T::zero()) {
                return Err(Error::NotPsd(to_f64(v)));
            }
            return Ok(Self {
                root: Root::Diagonal(d.map(|v| v.sqrt())),
            });
        }
        let (vals, vecs) = sym_eigen_ascending(crate::linalg::symmetrize(sigma), "covariance")?;
        let scale = vals.iter().fold(T::zero(), |a, v| a.max(v.abs()));
        let tol = scale * lit(1e-10);
        if vals[0] < -tol {
            return Err(Error::NotPsd(to_f64(vals[0])));
        }
        let roots = vals.map(|v| v.max(T::zero()).sqrt());
        let root = &vecs * DMatrix::from_diagonal(&roots) * vecs.transpose();
        Ok(Self { root: Root::Dense(root) })
    }

    pub fn dim(&self) -> usize {
        match &self.root {
            Root::Diagonal(d) => d.len(),
            Root::Dense(r) => r.nrows(),
        }
    }

    /// `count` independent draws as the columns of an `N×count` matrix.
    pub fn sample(&self, count: usize, rng: &mut impl rand::Rng) -> DMatrix<T> {
        let n = self.dim();
        let z = DMatrix::<T>::from_fn(n, count, |_, _| StandardNormal.sample(rng));
        match &self.root {
            Root::Diagonal(d) => {
                let mut z = z;
                for (i, mut row) in z.row_iter_mut().enumerate() {
                    row *= d[i];
                }
                z
            }
            Root::Dense(r) => r * z,
        }
    }
}

/// `count` draws from `N(0, Σ)` with a fresh generator seeded by `seed`.
pub fn sample_mvn<T: Real>(sigma: &DMatrix<T>, count: usize, seed: u64) -> Result<DMatrix<T>>
where
    StandardNormal: Distribution<T>,
{
    let sampler = MvnSampler::new(sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.sample(count, &mut rng))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one PRNG stream of one replicate.
pub fn stream_seed(base_seed: u64, rep_index: usize, stream_tag: u64) -> u64 {
    base_seed ^ splitmix64(splitmix64(rep_index as u64) ^ stream_tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

const STREAM_EPSILON: u64 = 1;
const STREAM_CONTROL: u64 = 2;
const STREAM_FINGERPRINT: u64 = 16;

fn read_user_matrix<T: Real>(path: &Path) -> Result<DMatrix<T>> {
    let m = crate::io::read_matrix(path)?;
    Ok(m.map(lit::<T>))
}

/// Seeded synthetic fingerprints (see [`FingerprintModel::Synthetic`]).
pub fn synthetic_fingerprints<T: Real>(n: usize, p: usize, correlation: f64, seed: u64) -> DMatrix<T>
where
    StandardNormal: Distribution<T>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::<T>::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let r = lit::<T>(correlation);
    let c = (T::one() - r * r).sqrt();
    let first = x.column(0).into_owned();
    for j in 1..p {
        let mixed = &first * r + x.column(j) * c;
        x.set_column(j, &mixed);
    }
    x
}

/// A scenario with its covariance and fingerprints materialized.
#[derive(Debug, Clone)]
pub struct Simulation<T: Real> {
    pub scenario: SimulationScenario,
    pub sigma: DMatrix<T>,
    pub true_x: DMatrix<T>,
    sampler: MvnSampler<T>,
}

impl<T: Real> Simulation<T>
where
    StandardNormal: Distribution<T>,
{
    pub fn new(scenario: SimulationScenario) -> Result<Self> {
        scenario.validate()?;
        let n = scenario.n_dim;
        let p = scenario.true_beta.len();
        let sigma = match &scenario.sigma_model {
            SigmaModel::Identity => DMatrix::identity(n, n),
            SigmaModel::SeparableAr1 {
                spatial_dim,
                temporal_dim,
                rho_s,
                rho_t,
                variances,
            } => {
                let v = match variances {
                    Some(v) => DVector::from_iterator(n, v.iter().map(|&x| lit::<T>(x))),
                    None => DVector::from_element(n, T::one()),
                };
                build_sigma_st(*spatial_dim, *temporal_dim, lit(*rho_s), lit(*rho_t), &v)?
            }
            SigmaModel::Unstructured { seed, condition_number } => {
                build_sigma_unstructured(n, *condition_number, *seed)
            }
            SigmaModel::UserMatrix { path } => read_user_matrix(path)?,
        };
        let true_x = match &scenario.true_x {
            FingerprintModel::Synthetic { seed, correlation } => synthetic_fingerprints(n, p, *correlation, *seed),
            FingerprintModel::UserMatrix { path } => read_user_matrix(path)?,
        };
        Self::from_parts(scenario, sigma, true_x)
    }

    /// Uses the given `Σ` and true fingerprints instead of the scenario's models.
    pub fn from_parts(scenario: SimulationScenario, sigma: DMatrix<T>, true_x: DMatrix<T>) -> Result<Self> {
        let n = scenario.n_dim;
        let p = scenario.true_beta.len();
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "sigma is {}x{} for n_dim = {n}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if true_x.nrows() != n || true_x.ncols() != p {
            return Err(Error::DimensionMismatch(format!(
                "true fingerprints are {}x{}, expected {n}x{p}",
                true_x.nrows(),
                true_x.ncols()
            )));
        }
        if scenario.ensemble_sizes.len() != p {
            return Err(Error::DimensionMismatch("ensemble sizes vs true_beta".into()));
        }
        let sampler = MvnSampler::new(&sigma)?;
        Ok(Self {
            scenario,
            sigma,
            true_x,
            sampler,
        })
    }

    /// Noise-free signal `γX`.
    pub fn signal(&self) -> DMatrix<T> {
        &self.true_x * lit::<T>(self.scenario.gamma)
    }

    pub fn true_beta(&self) -> DVector<T> {
        DVector::from_iterator(self.scenario.true_beta.len(), self.scenario.true_beta.iter().map(|&b| lit::<T>(b)))
    }

    fn rng(&self, rep_index: usize, tag: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(stream_seed(self.scenario.base_seed, rep_index, tag))
    }

    /// Control runs `Z ~ N(0, Σ)` of one replicate.
    pub fn control_runs(&self, rep_index: usize) -> DMatrix<T> {
        self.sampler.sample(self.scenario.m_runs, &mut self.rng(rep_index, STREAM_CONTROL))
    }

    /// Dataset of replicate `rep_index`.
    pub fn generate_replicate(&self, rep_index: usize) -> DetectionDataset<T> {
        let signal = self.signal();
        let beta = self.true_beta();
        let eps = self.sampler.sample(1, &mut self.rng(rep_index, STREAM_EPSILON));
        let y = &signal * &beta + eps.column(0);
        let mut x_tilde = signal;
        for (i, &n_i) in self.scenario.ensemble_sizes.iter().enumerate() {
            let eta = self.sampler.sample(1, &mut self.rng(rep_index, STREAM_FINGERPRINT + i as u64));
            let scale = T::one() / count::<T>(n_i).sqrt();
            x_tilde.column_mut(i).axpy(scale, &eta.column(0), T::one());
        }
        DetectionDataset::new(y, x_tilde, self.scenario.ensemble_sizes.clone(), self.control_runs(rep_index))
    }

    fn run_replicate(&self, rep_index: usize) -> ReplicateRecord {
        let ds = self.generate_replicate(rep_index);
        let options = FitOptions {
            alpha: self.scenario.alpha,
            grid_size: self.scenario.grid_size,
            ..FitOptions::default()
        };
        let outcome = ds.sample_covariance().and_then(|s| {
            let cache = build_cache(&s, &ds.x_tilde, &ds.y)?;
            let fit = fit_with_cache(&cache, &ds.ensemble_sizes, &options, Vec::new())?;
            let fixed = self
                .scenario
                .fixed_lambda_factors
                .iter()
                .map(|&c| {
                    tls_fit(&cache, &ds.ensemble_sizes, cache.tau_bar() * lit::<T>(c))
                        .ok()
                        .map(|sol| sol.beta_hat.iter().map(|&b| to_f64(b)).collect())
                })
                .collect();
            Ok((fit, fixed))
        });
        match outcome {
            Ok((fit, fixed_lambda_beta)) => {
                let truth = &self.scenario.true_beta;
                let intervals: Vec<(f64, f64)> =
                    fit.intervals.iter().map(|&(a, b)| (to_f64(a), to_f64(b))).collect();
                let covered = intervals
                    .iter()
                    .zip(truth)
                    .map(|(&(lo, hi), &b)| lo <= b && b <= hi)
                    .collect();
                ReplicateRecord {
                    rep_index,
                    beta_hat: fit.beta_hat.iter().map(|&b| to_f64(b)).collect(),
                    lambda_opt: to_f64(fit.lambda_opt),
                    tau_bar: to_f64(fit.tau_bar),
                    xi_diag: fit.xi_hat.diagonal().iter().map(|&v| to_f64(v)).collect(),
                    intervals,
                    covered,
                    fixed_lambda_beta,
                    error: None,
                }
            }
            Err(e) => ReplicateRecord {
                rep_index,
                error: Some(e.to_string()),
                ..ReplicateRecord::default()
            },
        }
    }

    /// Runs every replicate on up to `jobs` worker threads and aggregates.
    pub fn run(&self, jobs: usize) -> Result<SimulationReport> {
        let start = Instant::now();
        let reps = self.scenario.replicates;
        let records: Vec<ReplicateRecord> = if jobs <= 1 {
            (0..reps).map(|r| self.run_replicate(r)).collect()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
            pool.install(|| (0..reps).into_par_iter().map(|r| self.run_replicate(r)).collect())
        };
        let mut report = summarize(&self.scenario, records);
        report.elapsed_seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }
}

/// Result of one replicate. Failed replicates carry only `error`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub rep_index: usize,
    pub beta_hat: Vec<f64>,
    pub lambda_opt: f64,
    pub tau_bar: f64,
    pub xi_diag: Vec<f64>,
    pub intervals: Vec<(f64, f64)>,
    pub covered: Vec<bool>,
    /// `β̂(c·τ̄)` for each fixed factor `c`; `None` where the TLS fit failed.
    pub fixed_lambda_beta: Vec<Option<Vec<f64>>>,
    pub error: Option<String>,
}

impl ReplicateRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// Per-forcing Monte Carlo metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingSummary {
    pub true_beta: f64,
    pub mean_beta_hat: f64,
    pub bias: f64,
    /// Sample standard deviation (divisor `R - 1`).
    pub sd: f64,
    pub mse: f64,
    pub mean_ci_length: f64,
    pub coverage_rate: f64,
}

/// MSE of `β̂` at one fixed `λ = c·τ̄`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedLambdaSummary {
    pub factor: f64,
    pub mse: Vec<f64>,
    /// Sum over forcings.
    pub total_mse: f64,
    pub replicates_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: Option<String>,
    pub replicates_requested: usize,
    pub replicates_succeeded: usize,
    pub replicates_failed: usize,
    pub alpha: f64,
    pub forcings: Vec<ForcingSummary>,
    /// `Σᵢ MSEᵢ` of `β̂(λ̂_opt)`.
    pub total_mse: f64,
    pub mean_lambda_opt: f64,
    pub fixed_lambda: Vec<FixedLambdaSummary>,
    pub elapsed_seconds: f64,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs.iter().copied());
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Aggregates replicate records in index order; failures are counted and excluded.
pub fn summarize(scenario: &SimulationScenario, mut records: Vec<ReplicateRecord>) -> SimulationReport {
    records.sort_by_key(|r| r.rep_index);
    let ok: Vec<&ReplicateRecord> = records.iter().filter(|r| r.succeeded()).collect();
    let forcings: Vec<ForcingSummary> = scenario
        .true_beta
        .iter()
        .enumerate()
        .map(|(i, &truth)| {
            let est: Vec<f64> = ok.iter().map(|r| r.beta_hat[i]).collect();
            let m = mean(est.iter().copied());
            ForcingSummary {
                true_beta: truth,
                mean_beta_hat: m,
                bias: m - truth,
                sd: sample_sd(&est),
                mse: mean(est.iter().map(|b| (b - truth) * (b - truth))),
                mean_ci_length: mean(ok.iter().map(|r| r.intervals[i].1 - r.intervals[i].0)),
                coverage_rate: mean(ok.iter().map(|r| if r.covered[i] { 1.0 } else { 0.0 })),
            }
        })
        .collect();
    let fixed_lambda = scenario
        .fixed_lambda_factors
        .iter()
        .enumerate()
        .map(|(k, &factor)| {
            let fits: Vec<&Vec<f64>> = ok.iter().filter_map(|r| r.fixed_lambda_beta.get(k).and_then(Option::as_ref)).collect();
            let mse: Vec<f64> = scenario
                .true_beta
                .iter()
                .enumerate()
                .map(|(i, &truth)| mean(fits.iter().map(|b| (b[i] - truth) * (b[i] - truth))))
                .collect();
            FixedLambdaSummary {
                factor,
                total_mse: mse.iter().sum(),
                mse,
                replicates_used: fits.len(),
            }
        })
        .collect();
    SimulationReport {
        scenario: scenario.name.clone(),
        replicates_requested: records.len(),
        replicates_succeeded: ok.len(),
        replicates_failed: records.len() - ok.len(),
        alpha: scenario.alpha,
        total_mse: forcings.iter().map(|f| f.mse).sum(),
        mean_lambda_opt: mean(ok.iter().map(|r| r.lambda_opt)),
        forcings,
        fixed_lambda,
        elapsed_seconds: 0.0,
        records,
    }
}

/// Builds the scenario in `f64` and runs it.
pub fn run_scenario(scenario: &SimulationScenario, jobs: usize) -> Result<SimulationReport> {
    Simulation::<f64>::new(scenario.clone())?.run(jobs)
}

/// Discrete population spectrum `F^Σ` and aspect ratio `c = N/m`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpectrum<T: Real> {
    pub values: Vec<T>,
    pub weights: Vec<T>,
    pub aspect_ratio: T,
}

impl<T: Real> PopulationSpectrum<T> {
    /// Point mass at `value`.
    pub fn point_mass(value: T, aspect_ratio: T) -> Self {
        Self {
            values: vec![value],
            weights: vec![T::one()],
            aspect_ratio,
        }
    }

    /// Empirical spectrum of a covariance matrix.
    pub fn from_covariance(sigma: &DMatrix<T>, aspect_ratio: T) -> Result<Self> {
        let (vals, _) = sym_eigen_ascending(sigma.clone(), "population covariance")?;
        let n = vals.len();
        Ok(Self {
            values: vals.iter().map(|&v| v.max(T::zero())).collect(),
            weights: vec![T::one() / count::<T>(n); n],
            aspect_ratio,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.values.len() != self.weights.len() {
            return Err(Error::InvalidInput("spectrum values and weights must be non-empty and equal length".into()));
        }
        if self.values.iter().any(|&v| !(v >= T::zero())) || self.weights.iter().any(|&w| !(w >= T::zero())) {
            return Err(Error::InvalidInput("spectrum values and weights must be nonnegative".into()));
        }
        let total = self.weights.iter().fold(T::zero(), |a, &w| a + w);
        if (total - T::one()).abs() > lit(1e-9) {
            return Err(Error::InvalidInput(format!("spectrum weights sum to {}", to_f64(total))));
        }
        if !(self.aspect_ratio >= T::zero()) {
            return Err(Error::InvalidInput("aspect ratio must be >= 0".into()));
        }
        Ok(())
    }
}

/// Limiting Stieltjes transform and the deterministic equivalents of `Θ₁`, `Θ₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpSolution<T: Real> {
    /// `s(-λ)`
    pub s: T,
    /// `s'(-λ)`, the limit of `Q₂(λ)`.
    pub s_prime: T,
    pub omega1: T,
    pub omega2: T,
    pub iterations: usize,
}

const MP_TOL: f64 = 1e-12;
const MP_MAX_ITER: usize = 10_000;

/// Solves `s = ∫ dF(τ) / (τ(1 - c + λcs) + λ)` by damped fixed-point
/// iteration and evaluates `Ω₁(λ)`, `Ω₂(λ)`.
pub fn mp_stieltjes<T: Real>(spec: &PopulationSpectrum<T>, lambda: T) -> Result<MpSolution<T>> {
    spec.validate()?;
    if !(lambda > T::zero()) {
        return Err(Error::OutOfDomain(format!("lambda must be > 0, got {}", to_f64(lambda))));
    }
    let c = spec.aspect_ratio;
    let rhs = |s: T| {
        let a = T::one() - c + lambda * c * s;
        spec.values
            .iter()
            .zip(&spec.weights)
            .fold(T::zero(), |acc, (&tau, &w)| acc + w / (tau * a + lambda))
    };
    let mean_tau = spec
        .values
        .iter()
        .zip(&spec.weights)
        .fold(T::zero(), |acc, (&v, &w)| acc + v * w);
    let damping = lit::<T>(0.5);
    let mut s = T::one() / (mean_tau + lambda);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MP_MAX_ITER && s.is_finite() {
        let next = (T::one() - damping) * s + damping * rhs(s);
        iterations += 1;
        let done = (next - s).abs() < lit(MP_TOL);
        s = next;
        if done {
            converged = true;
            break;
        }
    }

    // The admissible root has 1 - c(1 - λs) > 0 and s <= 1/λ. On that interval
    // s - RHS(s) is increasing and changes sign, so bisect when the iteration
    // stalls or lands on the spurious root (possible for c > 1, small λ).
    let s_min = if c > T::one() { (c - T::one()) / (lambda * c) } else { T::zero() };
    let s_max = T::one() / lambda;
    if !converged || !(s > s_min && s <= s_max * (T::one() + lit(1e-12))) {
        let (mut lo, mut hi) = (s_min, s_max);
        let tol = lit::<T>(MP_TOL).max(<T as Real>::EPSILON * lit(4.0));
        let mut bisections = 0;
        while hi - lo > tol * (T::one() + hi) {
            if bisections >= MP_MAX_ITER {
                return Err(Error::NoConvergence {
                    iterations: iterations + bisections,
                });
            }
            let mid = (lo + hi) / lit(2.0);
            if mid - rhs(mid) < T::zero() {
                lo = mid;
            } else {
                hi = mid;
            }
            bisections += 1;
        }
        s = (lo + hi) / lit(2.0);
        iterations += bisections;
        if !s.is_finite() {
            return Err(Error::NoConvergence { iterations });
        }
    }

    // Implicit differentiation: ds/dλ = -(c s B + A) / (1 + λ c B),
    // A = ∫ dF/h², B = ∫ τ dF/h², h = τ(1 - c + λcs) + λ.
    let a_coef = T::one() - c + lambda * c * s;
    let (a_int, b_int) = spec
        .values
        .iter()
        .zip(&spec.weights)
        .fold((T::zero(), T::zero()), |(a, b), (&tau, &w)| {
            let h = tau * a_coef + lambda;
            (a + w / (h * h), b + w * tau / (h * h))
        });
    let ds_dlambda = -(c * s * b_int + a_int) / (T::one() + lambda * c * b_int);
    let s_prime = -ds_dlambda;

    let one_minus = T::one() - lambda * s;
    let b = T::one() - c * one_minus;
    let omega1 = one_minus / b;
    let b3 = b * b * b;
    let omega2 = one_minus / b3 - lambda * (s - lambda * s_prime) / (b3 * b);
    Ok(MpSolution {
        s,
        s_prime,
        omega1,
        omega2,
        iterations,
    })
}

/// Dense GLS estimate `(XᵀΣ⁻¹X)⁻¹XᵀΣ⁻¹Y`.
pub fn gls_oracle<T: Real>(y: &DVector<T>, x: &DMatrix<T>, sigma: &DMatrix<T>) -> Result<DVector<T>> {
    let n = y.len();
    if x.nrows() != n || sigma.nrows() != n || sigma.ncols() != n {
        return Err(Error::DimensionMismatch("gls inputs".into()));
    }
    let chol = sigma.clone().cholesky().ok_or(Error::Singular("sigma"))?;
    let wx = chol.l().solve_lower_triangular(x).ok_or(Error::Singular("sigma"))?;
    let wy = chol.l().solve_lower_triangular(y).ok_or(Error::Singular("sigma"))?;
    let normal = wx.transpose() * &wx;
    let rhs = wx.transpose() * wy;
    let nchol = normal.cholesky().ok_or(Error::Singular("X^T Sigma^-1 X"))?;
    Ok(nchol.solve(&rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    fn scenario(n: usize, m: usize, reps: usize) -> SimulationScenario {
        SimulationScenario {
            name: Some("test".into()),
            n_dim: n,
            true_beta: vec![1.0, 1.0],
            gamma: 1.0,
            ensemble_sizes: vec![35, 46],
            m_runs: m,
            sigma_model: SigmaModel::Identity,
            true_x: FingerprintModel::Synthetic { seed: 7, correlation: 0.0 },
            replicates: reps,
            base_seed: 2024,
            alpha: 0.05,
            grid_size: 30,
            fixed_lambda_factors: vec![],
        }
    }

    #[test]
    fn sigma_st_examples() {
        let s = build_sigma_st(2, 1, 0.1, 0.0, &DVector::from_element(2, 1.0)).unwrap();
        assert_eq!(s, dmatrix![1.0, 0.1; 0.1, 1.0]);

        let v = dvector![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let s = build_sigma_st(3, 2, 0.0, 0.0, &v).unwrap();
        assert_eq!(s, DMatrix::from_diagonal(&v));

        let s = build_sigma_st(2, 2, 0.1, 0.5, &DVector::from_element(4, 1.0)).unwrap();
        // location 1 time 1 -> index 0; location 2 time 2 -> index 3
        assert_abs_diff_eq!(s[(0, 3)], 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(s[(0, 1)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s[(0, 2)], 0.1, epsilon = 1e-15);

        assert!(matches!(
            build_sigma_st(2, 2, 1.5, 0.1, &DVector::from_element(4, 1.0)),
            Err(Error::InvalidCorrelation(_))
        ));
    }

    #[test]
    fn sigma_st_is_positive_definite() {
        let v = DVector::from_fn(48, |i, _| 0.5 + (i % 5) as f64 * 0.3);
        let s = build_sigma_st(8, 6, 0.1, 0.1, &v).unwrap();
        assert_eq!(s, s.transpose());
        assert!(s.cholesky().is_some());
    }

    #[test]
    fn unstructured_surrogate() {
        let s = build_sigma_unstructured::<f64>(30, 1e3, 5);
        assert_eq!(s, s.transpose());
        let (vals, _) = sym_eigen_ascending(s.clone(), "t").unwrap();
        assert_abs_diff_eq!(vals[29] / vals[0], 1e3, epsilon = 1e-6 * 1e3);
        assert_abs_diff_eq!(s.trace() / 30.0, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn mvn_examples() {
        let z = sample_mvn(&DMatrix::<f64>::zeros(3, 3), 5, 1).unwrap();
        assert_eq!(z, DMatrix::zeros(3, 5));

        let sigma = dmatrix![2.0, 0.5; 0.5, 1.0];
        assert_eq!(sample_mvn(&sigma, 10, 42).unwrap(), sample_mvn(&sigma, 10, 42).unwrap());
        assert_ne!(sample_mvn(&sigma, 10, 42).unwrap(), sample_mvn(&sigma, 10, 43).unwrap());

        let draws = sample_mvn(&dmatrix![1.0, 0.0; 0.0, 4.0], 100_000, 3).unwrap();
        for (i, target) in [1.0, 4.0].iter().enumerate() {
            let var = draws.row(i).iter().map(|v| v * v).sum::<f64>() / 1e5;
            assert!(var > 0.97 * target && var < 1.03 * target, "{var}");
        }

        assert!(matches!(sample_mvn(&dmatrix![1.0, 2.0; 2.0, 1.0], 1, 0), Err(Error::NotPsd(_))));
    }

    #[test]
    fn dense_mvn_covariance() {
        let sigma = dmatrix![2.0, 0.8; 0.8, 1.0];
        let draws = sample_mvn(&sigma, 200_000, 9).unwrap();
        let emp = &draws * draws.transpose() / 200_000.0;
        assert!((emp - sigma).abs().max() < 0.03);
    }

    #[test]
    fn noise_free_replicate() {
        let scn = scenario(6, 10, 1);
        let x = synthetic_fingerprints::<f64>(6, 2, 0.0, 1);
        let sim = Simulation::from_parts(scn, DMatrix::zeros(6, 6), x.clone()).unwrap();
        let ds = sim.generate_replicate(0);
        assert_eq!(ds.x_tilde, x);
        assert_eq!(ds.y, &x * dvector![1.0, 1.0]);
    }

    #[test]
    fn zero_signal_replicate() {
        let mut scn = scenario(6, 10, 1);
        scn.gamma = 0.0;
        let x = synthetic_fingerprints::<f64>(6, 2, 0.0, 1);
        let sim = Simulation::from_parts(scn, DMatrix::identity(6, 6), x).unwrap();
        let ds = sim.generate_replicate(0);
        // Pure noise: Y is the ε stream, X̃ᵢ the scaled η streams.
        let eps = sim.sampler.sample(1, &mut sim.rng(0, STREAM_EPSILON));
        assert_eq!(ds.y, eps.column(0));
        assert!(ds.x_tilde.iter().all(|v| *v != 0.0));
    }

    #[test]
    fn replicates_are_deterministic_and_independent() {
        let sim = Simulation::<f64>::new(scenario(12, 20, 3)).unwrap();
        assert_eq!(sim.generate_replicate(1), sim.generate_replicate(1));
        assert_ne!(sim.generate_replicate(1).y, sim.generate_replicate(2).y);
        let seeds: Vec<u64> = (0..4).map(|t| stream_seed(2024, 1, t)).collect();
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn summary_arithmetic() {
        let scn = SimulationScenario {
            true_beta: vec![1.0],
            ensemble_sizes: vec![10],
            ..scenario(6, 10, 3)
        };
        let rec = |i: usize, b: f64, ci: (f64, f64)| ReplicateRecord {
            rep_index: i,
            beta_hat: vec![b],
            intervals: vec![ci],
            covered: vec![ci.0 <= 1.0 && 1.0 <= ci.1],
            ..ReplicateRecord::default()
        };
        let records = vec![
            rec(2, 1.0, (0.8, 1.2)),
            rec(0, 0.9, (0.7, 1.1)),
            rec(1, 1.1, (1.05, 1.15)),
            ReplicateRecord {
                rep_index: 3,
                error: Some("boom".into()),
                ..ReplicateRecord::default()
            },
        ];
        let r = summarize(&scn, records);
        let f = &r.forcings[0];
        assert_abs_diff_eq!(f.bias, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.sd, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(f.coverage_rate, 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.mean_ci_length, (0.4 + 0.4 + 0.1) / 3.0, epsilon = 1e-15);
        assert_eq!((r.replicates_succeeded, r.replicates_failed), (3, 1));
        assert_eq!(r.records[0].rep_index, 0);
    }

    #[test]
    fn serial_and_parallel_runs_agree() {
        let mut scn = scenario(16, 40, 6);
        scn.fixed_lambda_factors = vec![1.0];
        let sim = Simulation::<f64>::new(scn).unwrap();
        let a = sim.run(1).unwrap();
        let b = sim.run(3).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.forcings, b.forcings);
        assert_eq!(a.fixed_lambda, b.fixed_lambda);
        assert_eq!(a.replicates_succeeded, 6);
    }

    #[test]
    fn scenario_validation() {
        let mut scn = scenario(48, 100, 1);
        scn.sigma_model = SigmaModel::SeparableAr1 {
            spatial_dim: 8,
            temporal_dim: 6,
            rho_s: 1.5,
            rho_t: 0.1,
            variances: None,
        };
        assert!(matches!(scn.validate(), Err(Error::InvalidCorrelation(_))));
        scn.sigma_model = SigmaModel::SeparableAr1 {
            spatial_dim: 8,
            temporal_dim: 5,
            rho_s: 0.1,
            rho_t: 0.1,
            variances: None,
        };
        assert!(matches!(scn.validate(), Err(Error::DimensionMismatch(_))));
        let mut scn = scenario(48, 100, 1);
        scn.gamma = 0.0;
        assert!(scn.validate().is_err());
        let mut scn = scenario(48, 100, 0);
        scn.replicates = 0;
        assert!(scn.validate().is_err());
    }

    #[test]
    fn scenario_json_round_trip() {
        let mut scn = scenario(48, 100, 5);
        scn.sigma_model = SigmaModel::SeparableAr1 {
            spatial_dim: 8,
            temporal_dim: 6,
            rho_s: 0.1,
            rho_t: 0.1,
            variances: None,
        };
        let text = serde_json::to_string(&scn).unwrap();
        let back: SimulationScenario = serde_json::from_str(&text).unwrap();
        assert_eq!(scn, back);
        let minimal = r#"{"n_dim": 4, "true_beta": [1.0], "gamma": 1.0, "ensemble_sizes": [3],
            "m_runs": 8, "sigma_model": {"kind": "identity"},
            "true_x": {"kind": "synthetic", "seed": 1}, "replicates": 2, "base_seed": 9}"#;
        let scn: SimulationScenario = serde_json::from_str(minimal).unwrap();
        assert_eq!(scn.alpha, 0.05);
        assert_eq!(scn.grid_size, 100);
    }

    #[test]
    fn mp_closed_forms() {
        let golden = (5f64.sqrt() - 1.0) / 2.0;
        let r = mp_stieltjes(&PopulationSpectrum::point_mass(1.0, 1.0), 1.0).unwrap();
        assert!((r.s - golden).abs() < 1e-10);
        let r = mp_stieltjes(&PopulationSpectrum::point_mass(1.0f64, 0.0), 1.0).unwrap();
        assert!((r.s - 0.5).abs() < 1e-10);
        let r = mp_stieltjes(&PopulationSpectrum::point_mass(2.0, 0.5), 1.0).unwrap();
        assert!((r.s - (2f64.sqrt() - 1.0)).abs() < 1e-10);
    }

    #[test]
    fn mp_derivative_and_omega_identity() {
        let spec = PopulationSpectrum {
            values: vec![0.5f64, 1.0, 3.0],
            weights: vec![0.3, 0.5, 0.2],
            aspect_ratio: 0.7,
        };
        let c = spec.aspect_ratio;
        for lambda in [0.2, 1.0, 2.5] {
            let h = 1e-5 * lambda;
            let r = mp_stieltjes(&spec, lambda).unwrap();
            let up = mp_stieltjes(&spec, lambda + h).unwrap();
            let dn = mp_stieltjes(&spec, lambda - h).unwrap();
            let fd = -(up.s - dn.s) / (2.0 * h);
            assert!((r.s_prime - fd).abs() < 1e-6);
            let d_omega1 = (up.omega1 - dn.omega1) / (2.0 * h);
            let rhs = (1.0 + c * r.omega1).powi(2) * (r.omega1 + lambda * d_omega1);
            assert!((r.omega2 - rhs).abs() < 1e-5);
        }
    }

    #[test]
    fn mp_avoids_spurious_root() {
        // c > 1, small λ: the damped iteration from its default start is
        // attracted by the negative root of the quadratic.
        let (tau, c, lambda): (f64, f64, f64) = (4.222431669346366, 1.9617943605418133, 0.05);
        let r = mp_stieltjes(&PopulationSpectrum::point_mass(tau, c), lambda).unwrap();
        let (qa, qb) = (lambda * c * tau, tau * (1.0 - c) + lambda);
        let root = (-qb + (qb * qb + 4.0 * qa).sqrt()) / (2.0 * qa);
        assert!((r.s - root).abs() < 1e-9 * root);
        assert!(1.0 - c * (1.0 - lambda * r.s) > 0.0);
        let r32 = mp_stieltjes(&PopulationSpectrum::point_mass(tau as f32, c as f32), lambda as f32).unwrap();
        assert!((r32.s as f64 - root).abs() < 1e-4 * root);
    }

    #[test]
    fn mp_rejects_bad_spectrum() {
        let spec = PopulationSpectrum {
            values: vec![1.0],
            weights: vec![0.5],
            aspect_ratio: 1.0,
        };
        assert!(mp_stieltjes(&spec, 1.0).is_err());
        assert!(mp_stieltjes(&PopulationSpectrum::point_mass(1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn gls_examples() {
        let x = dmatrix![1.0, 0.0; 1.0, 1.0; 1.0, 2.0; 1.0, 3.0];
        let beta = dvector![0.5, -1.5];
        let y = &x * &beta;
        let b = gls_oracle(&y, &x, &DMatrix::identity(4, 4)).unwrap();
        assert!((b - &beta).abs().max() < 1e-12);

        let y = dvector![1.0, 0.0, 2.0, 2.5];
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
        let b = gls_oracle(&y, &x, &DMatrix::identity(4, 4)).unwrap();
        assert!((b - ols).abs().max() < 1e-12);
    }

    #[test]
    fn gls_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = DMatrix::<f64>::from_fn(6, 2, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::<f64>::from_fn(6, |_, _| StandardNormal.sample(&mut rng));
        let a = DMatrix::<f64>::from_fn(6, 6, |_, _| StandardNormal.sample(&mut rng));
        let sigma = &a * a.transpose() + DMatrix::identity(6, 6);
        let si = sigma.clone().try_inverse().unwrap();
        let brute = (x.transpose() * &si * &x).try_inverse().unwrap() * x.transpose() * &si * &y;
        let b = gls_oracle(&y, &x, &sigma).unwrap();
        assert!((b - brute).abs().max() < 1e-10);
        assert!(gls_oracle(&y, &DMatrix::zeros(6, 2), &sigma).is_err());
    }
}
