#![allow(dead_code)]

use finprint::{build_cache, compute_sample_covariance, SampleCovariance, SpectralCache};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Cache for `S = diag(d)` with zero data.
pub fn diag_cache(d: &[f64], m: usize, p: usize) -> SpectralCache<f64> {
    let n = d.len();
    let s = SampleCovariance::from_matrix(DMatrix::from_diagonal(&DVector::from_column_slice(d)), m).unwrap();
    build_cache(&s, &DMatrix::zeros(n, p), &DVector::zeros(n)).unwrap()
}

/// Random errors-in-variables instance with identity noise.
pub struct Instance {
    pub s: SampleCovariance<f64>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub sizes: Vec<usize>,
}

pub fn instance(n: usize, m: usize, sizes: &[usize], seed: u64) -> Instance {
    let mut r = rng(seed);
    let p = sizes.len();
    let x = gaussian(n, p, &mut r);
    let beta = DVector::from_element(p, 1.0);
    let y = &x * &beta + gaussian(n, 1, &mut r).column(0);
    let mut xt = x;
    for (j, &nj) in sizes.iter().enumerate() {
        let noise = gaussian(n, 1, &mut r) / (nj as f64).sqrt();
        xt.set_column(j, &(xt.column(j) + noise.column(0)));
    }
    let s = compute_sample_covariance(&gaussian(n, m, &mut r)).unwrap();
    Instance {
        s,
        x: xt,
        y,
        sizes: sizes.to_vec(),
    }
}

/// Dense `(S + λI)⁻¹`.
pub fn dense_inverse(s: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let n = s.nrows();
    (s + DMatrix::identity(n, n) * lambda).cholesky().unwrap().inverse()
}

/// Dense TLS objective `‖Σ̂^{-1/2}(Y - X̃β)‖² / (1 + βᵀDβ)`.
pub fn dense_tls_objective(
    s: &DMatrix<f64>,
    lambda: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    sizes: &[usize],
    beta: &DVector<f64>,
) -> f64 {
    let r = y - x * beta;
    let w = dense_inverse(s, lambda);
    let pen: f64 = 1.0 + beta.iter().zip(sizes).map(|(b, &n)| b * b / n as f64).sum::<f64>();
    r.dot(&(&w * &r)) / pen
}
