//! Plain-text matrices and JSON dataset manifests.
//!
//! Matrix files hold one row per line, with entries separated by commas,
//! tabs or spaces. Blank lines and lines starting with `#` are skipped.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{ensemble_mean, DetectionDataset, SampleCovariance};
use crate::error::{Error, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses delimited text into a matrix.
pub fn parse_matrix(text: &str, origin: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|tok| !tok.is_empty())
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| Error::Parse {
                    path: origin.to_string(),
                    line: idx + 1,
                    msg: format!("{tok:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: idx + 1,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("{origin}: no data")));
    }
    let ncols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_matrix(&text, &path.display().to_string())
}

/// Reads a single row or a single column as a vector.
pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let m = read_matrix(path)?;
    match m.shape() {
        (_, 1) => Ok(m.column(0).into_owned()),
        (1, n) => Ok(DVector::from_iterator(n, m.row(0).iter().copied())),
        (r, c) => Err(Error::DimensionMismatch(format!(
            "{}: expected a vector, found {r}x{c}",
            path.display()
        ))),
    }
}

/// Comma-separated rendering with round-trip precision.
pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    std::fs::write(path, format_matrix(m)).map_err(io_err(path))
}

/// JSON description of a dataset on disk. Paths are relative to the manifest.
///
/// Fingerprints come either as `x_tilde` (an `N×p` matrix of ensemble means,
/// with `ensemble_sizes`) or as `forcing_runs`, one `N×nᵢ` matrix per forcing,
/// whose means and column counts are used. Internal variability comes either
/// as `control_runs` (`N×m`) or as `sample_cov` plus `m`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub y: PathBuf,
    #[serde(default)]
    pub x_tilde: Option<PathBuf>,
    #[serde(default)]
    pub forcing_runs: Option<Vec<PathBuf>>,
    #[serde(default)]
    pub ensemble_sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub control_runs: Option<PathBuf>,
    #[serde(default)]
    pub sample_cov: Option<PathBuf>,
    #[serde(default)]
    pub m: Option<usize>,
}

impl DatasetManifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })
    }

    /// Every file the manifest refers to, resolved against `base`.
    pub fn referenced_files(&self, base: &Path) -> Vec<PathBuf> {
        let mut files = vec![base.join(&self.y)];
        files.extend(self.x_tilde.iter().map(|p| base.join(p)));
        files.extend(self.forcing_runs.iter().flatten().map(|p| base.join(p)));
        files.extend(self.control_runs.iter().map(|p| base.join(p)));
        files.extend(self.sample_cov.iter().map(|p| base.join(p)));
        files
    }

    /// Loads the referenced files. Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<DetectionDataset<f64>> {
        let y = read_vector(&base.join(&self.y))?;
        let (x_tilde, sizes) = match (&self.x_tilde, &self.forcing_runs) {
            (Some(x), None) => {
                let sizes = self
                    .ensemble_sizes
                    .clone()
                    .ok_or_else(|| Error::InvalidInput("x_tilde requires ensemble_sizes".into()))?;
                (read_matrix(&base.join(x))?, sizes)
            }
            (None, Some(runs)) => {
                if runs.is_empty() {
                    return Err(Error::InvalidInput("forcing_runs is empty".into()));
                }
                let mut cols = Vec::with_capacity(runs.len());
                let mut sizes = Vec::with_capacity(runs.len());
                for p in runs {
                    let r = read_matrix(&base.join(p))?;
                    sizes.push(r.ncols());
                    cols.push(ensemble_mean(&r)?);
                }
                if let Some(declared) = &self.ensemble_sizes {
                    if declared != &sizes {
                        return Err(Error::DimensionMismatch(format!(
                            "ensemble_sizes {declared:?} disagree with forcing_runs {sizes:?}"
                        )));
                    }
                }
                if cols.iter().any(|c| c.len() != cols[0].len()) {
                    return Err(Error::DimensionMismatch("forcing runs differ in length".into()));
                }
                (DMatrix::from_columns(&cols), sizes)
            }
            _ => {
                return Err(Error::InvalidInput(
                    "exactly one of x_tilde and forcing_runs is required".into(),
                ))
            }
        };
        match (&self.control_runs, &self.sample_cov, self.m) {
            (Some(z), None, None) => Ok(DetectionDataset::new(y, x_tilde, sizes, read_matrix(&base.join(z))?)),
            (None, Some(s), Some(m)) => {
                let s = SampleCovariance::from_matrix(read_matrix(&base.join(s))?, m)?;
                Ok(DetectionDataset::with_sample_covariance(y, x_tilde, sizes, s))
            }
            _ => Err(Error::InvalidInput(
                "either control_runs, or sample_cov together with m, is required".into(),
            )),
        }
    }
}

/// Reads a manifest and the dataset it describes.
pub fn load_dataset(manifest_path: &Path) -> Result<DetectionDataset<f64>> {
    let manifest = DatasetManifest::from_path(manifest_path)?;
    manifest.load(manifest_path.parent().unwrap_or_else(|| Path::new(".")))
}
