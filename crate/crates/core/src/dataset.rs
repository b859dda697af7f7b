//! Regression-problem instances and the control-run sample covariance.
//!
//! A [`DetectionDataset`] holds the observation vector `Y`, the ensemble-mean
//! fingerprints `X̃` (one column per forcing), the ensemble sizes `nᵢ` and the
//! source of the noise covariance estimate: either the raw control runs or a
//! precomputed sample covariance.
//!
//! Control runs are taken as already centered; no mean is removed here.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{count, Real};

/// Sample covariance `S = (1/m) Σⱼ ZⱼZⱼᵀ` of `m` centered control runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCovariance<T: Real> {
    pub s: DMatrix<T>,
    pub m: usize,
}

impl<T: Real> SampleCovariance<T> {
    /// Wraps a precomputed covariance matrix. The matrix must be square,
    /// finite and symmetric; positive semidefiniteness is checked later when
    /// the spectrum is computed.
    pub fn from_matrix(s: DMatrix<T>, m: usize) -> Result<Self> {
        if !s.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "sample covariance is {}x{}",
                s.nrows(),
                s.ncols()
            )));
        }
        if m == 0 {
            return Err(Error::InvalidInput("number of control runs m must be >= 1".into()));
        }
        if !all_finite(s.iter()) {
            return Err(Error::NonFinite("sample covariance"));
        }
        let n = s.nrows();
        let scale = s.iter().fold(T::zero(), |a, &v| a.max(v.abs()));
        let tol = scale * crate::scalar::lit(1e-10);
        for i in 0..n {
            for j in (i + 1)..n {
                if (s[(i, j)] - s[(j, i)]).abs() > tol {
                    return Err(Error::InvalidInput(format!(
                        "sample covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        // Exact symmetry from here on.
        let mut s = s;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = (s[(i, j)] + s[(j, i)]) * crate::scalar::lit(0.5);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        Ok(Self { s, m })
    }

    pub fn n_dim(&self) -> usize {
        self.s.nrows()
    }

    /// Average eigenvalue `τ̄ = tr(S)/N`.
    pub fn tau_bar(&self) -> T {
        self.s.trace() / count(self.n_dim())
    }
}

/// Where the weight-matrix estimate comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceSource<T: Real> {
    /// Raw control runs, one per column (`N×m`).
    ControlRuns(DMatrix<T>),
    /// A precomputed sample covariance.
    Sample(SampleCovariance<T>),
}

/// One detection-and-attribution regression problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionDataset<T: Real> {
    pub y: DVector<T>,
    pub x_tilde: DMatrix<T>,
    pub ensemble_sizes: Vec<usize>,
    pub covariance: CovarianceSource<T>,
}

impl<T: Real> DetectionDataset<T> {
    pub fn new(
        y: DVector<T>,
        x_tilde: DMatrix<T>,
        ensemble_sizes: Vec<usize>,
        control_runs: DMatrix<T>,
    ) -> Self {
        Self {
            y,
            x_tilde,
            ensemble_sizes,
            covariance: CovarianceSource::ControlRuns(control_runs),
        }
    }

    pub fn with_sample_covariance(
        y: DVector<T>,
        x_tilde: DMatrix<T>,
        ensemble_sizes: Vec<usize>,
        sample_cov: SampleCovariance<T>,
    ) -> Self {
        Self {
            y,
            x_tilde,
            ensemble_sizes,
            covariance: CovarianceSource::Sample(sample_cov),
        }
    }

    pub fn n_dim(&self) -> usize {
        self.y.len()
    }

    pub fn n_forcings(&self) -> usize {
        self.x_tilde.ncols()
    }

    pub fn m_runs(&self) -> usize {
        match &self.covariance {
            CovarianceSource::ControlRuns(z) => z.ncols(),
            CovarianceSource::Sample(s) => s.m,
        }
    }

    /// Diagonal of `D = diag(1/n₁, …, 1/nₚ)`.
    pub fn d_diag(&self) -> DVector<T> {
        d_diag(&self.ensemble_sizes)
    }

    pub fn sample_covariance(&self) -> Result<SampleCovariance<T>> {
        match &self.covariance {
            CovarianceSource::ControlRuns(z) => compute_sample_covariance(z),
            CovarianceSource::Sample(s) => Ok(s.clone()),
        }
    }
}

/// Diagonal of `D` for the given ensemble sizes.
pub fn d_diag<T: Real>(ensemble_sizes: &[usize]) -> DVector<T> {
    DVector::from_iterator(
        ensemble_sizes.len(),
        ensemble_sizes.iter().map(|&n| T::one() / count::<T>(n)),
    )
}

fn all_finite<'a, T: Real>(mut it: impl Iterator<Item = &'a T>) -> bool {
    it.all(|v| v.is_finite())
}

/// `S = (1/m) Σⱼ ZⱼZⱼᵀ` over the columns of `control_runs`, exactly symmetric.
pub fn compute_sample_covariance<T: Real>(control_runs: &DMatrix<T>) -> Result<SampleCovariance<T>> {
    let m = control_runs.ncols();
    if m == 0 {
        return Err(Error::InvalidInput("control runs matrix has no columns".into()));
    }
    if !all_finite(control_runs.iter()) {
        return Err(Error::NonFinite("control runs"));
    }
    let n = control_runs.nrows();
    let inv_m = T::one() / count::<T>(m);
    let gram = control_runs * control_runs.transpose();
    let mut s = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = gram[(i, j)] * inv_m;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(SampleCovariance { s, m })
}

/// Column-wise mean of the `nᵢ` runs of one forcing.
pub fn ensemble_mean<T: Real>(runs: &DMatrix<T>) -> Result<DVector<T>> {
    if runs.ncols() == 0 {
        return Err(Error::InvalidInput("ensemble has no runs".into()));
    }
    if !all_finite(runs.iter()) {
        return Err(Error::NonFinite("ensemble runs"));
    }
    Ok(runs.column_mean())
}

/// Non-fatal findings of [`validate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationWarning {
    /// `m < N`: the sample covariance is singular. Expected and permitted.
    SingularSampleCovariance { n_dim: usize, m_runs: usize },
    /// Fingerprint column with (near-)zero norm; TLS is not identifiable.
    ZeroFingerprint { forcing: usize },
}

impl std::fmt::Display for ValidationWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ValidationWarning::SingularSampleCovariance { n_dim, m_runs } => write!(
                f,
                "singular sample covariance (m = {m_runs} < N = {n_dim})"
            ),
            ValidationWarning::ZeroFingerprint { forcing } => {
                write!(f, "fingerprint {forcing} has zero norm")
            }
        }
    }
}

/// Summary of a dataset that passed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub n_dim: usize,
    pub n_forcings: usize,
    pub m_runs: usize,
    pub n_over_m: f64,
    pub tau_bar: f64,
    /// `min(N, m)`, the largest rank the sample covariance can have.
    pub max_rank: usize,
    pub warnings: Vec<ValidationWarning>,
}

/// Checks shapes and finiteness. Shape or value problems are errors;
/// conditions the method tolerates are reported as warnings.
pub fn validate_dataset<T: Real>(ds: &DetectionDataset<T>) -> Result<ValidationReport> {
    let n = ds.y.len();
    let p = ds.x_tilde.ncols();
    if ds.x_tilde.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "y has length {n} but x_tilde has {} rows",
            ds.x_tilde.nrows()
        )));
    }
    if ds.ensemble_sizes.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "x_tilde has {p} columns but {} ensemble sizes were given",
            ds.ensemble_sizes.len()
        )));
    }
    if p == 0 {
        return Err(Error::InvalidInput("at least one forcing is required".into()));
    }
    if n < p + 1 {
        return Err(Error::InvalidInput(format!("need N >= p+1, got N = {n}, p = {p}")));
    }
    if let Some(i) = ds.ensemble_sizes.iter().position(|&k| k == 0) {
        return Err(Error::InvalidInput(format!("ensemble size of forcing {i} is zero")));
    }
    if !all_finite(ds.y.iter()) {
        return Err(Error::NonFinite("y"));
    }
    if !all_finite(ds.x_tilde.iter()) {
        return Err(Error::NonFinite("x_tilde"));
    }
    let (m, tau_bar) = match &ds.covariance {
        CovarianceSource::ControlRuns(z) => {
            if z.nrows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "y has length {n} but control runs have {} rows",
                    z.nrows()
                )));
            }
            if z.ncols() == 0 {
                return Err(Error::InvalidInput("no control runs".into()));
            }
            if !all_finite(z.iter()) {
                return Err(Error::NonFinite("control runs"));
            }
            let ss: T = z.iter().fold(T::zero(), |a, &v| a + v * v);
            (z.ncols(), ss / count::<T>(z.ncols() * n))
        }
        CovarianceSource::Sample(s) => {
            if s.n_dim() != n {
                return Err(Error::DimensionMismatch(format!(
                    "y has length {n} but sample covariance is {0}x{0}",
                    s.n_dim()
                )));
            }
            (s.m, s.tau_bar())
        }
    };

    let mut warnings = Vec::new();
    if m < n {
        warnings.push(ValidationWarning::SingularSampleCovariance { n_dim: n, m_runs: m });
    }
    for (i, col) in ds.x_tilde.column_iter().enumerate() {
        if crate::scalar::to_f64(col.norm()) <= 1e-12 {
            warnings.push(ValidationWarning::ZeroFingerprint { forcing: i });
        }
    }
    Ok(ValidationReport {
        n_dim: n,
        n_forcings: p,
        m_runs: m,
        n_over_m: n as f64 / m as f64,
        tau_bar: crate::scalar::to_f64(tau_bar),
        max_rank: n.min(m),
        warnings,
    })
}
