mod common;

use common::{dense_inverse, gaussian, instance, rng};
use finprint::simulate::{FingerprintModel, SigmaModel};
use finprint::{
    build_cache, compute_sample_covariance, delta1_hat, delta2_hat, evaluate_lambda, fit_optimal, k_hat, mp_stieltjes,
    xi_hat, FitOptions, PopulationSpectrum, Simulation, SimulationScenario,
};
use nalgebra::{DMatrix, DVector};

#[test]
fn k_hat_tracks_trace_oracle() {
    let (n, m, reps) = (64, 128, 500);
    let mut oracle = 0.0;
    let mut estimate = 0.0;
    for seed in 0..reps {
        let z = gaussian(n, m, &mut rng(70_000 + seed));
        let s = compute_sample_covariance(&z).unwrap();
        let cache = build_cache(&s, &DMatrix::zeros(n, 1), &DVector::zeros(n)).unwrap();
        let lambda = cache.tau_bar();
        // Σ = I: tr(Σ̂⁻¹ΣΣ̂⁻¹Σ)/N = tr(Σ̂⁻²)/N
        let w = dense_inverse(&s.s, lambda);
        oracle += (&w * &w).trace() / n as f64;
        estimate += k_hat(&cache.functionals(lambda).unwrap());
    }
    let (oracle, estimate) = (oracle / reps as f64, estimate / reps as f64);
    assert!((oracle - estimate).abs() < 0.02, "oracle {oracle} vs k_hat {estimate}");
}

#[test]
fn theta_matches_deterministic_equivalents() {
    let n = 400;
    let values: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 0.5 } else { 1.5 }).collect();
    let root = DVector::from_iterator(n, values.iter().map(|v| v.sqrt()));
    let spec = PopulationSpectrum {
        values: vec![0.5, 1.5],
        weights: vec![0.5, 0.5],
        aspect_ratio: 1.0,
    };
    let lambdas = [0.5, 1.0, 2.0];
    let limits: Vec<_> = lambdas.iter().map(|&l| mp_stieltjes(&spec, l).unwrap()).collect();
    let mut good = 0;
    for seed in 0..100 {
        let mut z = gaussian(n, n, &mut rng(90_000 + seed));
        for (i, mut row) in z.row_iter_mut().enumerate() {
            row *= root[i];
        }
        let s = compute_sample_covariance(&z).unwrap();
        let cache = build_cache(&s, &DMatrix::zeros(n, 1), &DVector::zeros(n)).unwrap();
        let ok = lambdas.iter().zip(&limits).all(|(&lambda, lim)| {
            (cache.theta1(lambda).unwrap() - lim.omega1).abs() < 0.03
                && (cache.theta2(lambda).unwrap() - lim.omega2).abs() < 0.06
        });
        if ok {
            good += 1;
        }
    }
    assert!(good >= 95, "{good}/100");
}

#[test]
fn q_functionals_match_stieltjes_limit() {
    let n = 300;
    let spec = PopulationSpectrum::point_mass(1.0, 0.5);
    let lim = mp_stieltjes(&spec, 0.8).unwrap();
    let z = gaussian(n, 2 * n, &mut rng(5));
    let s = compute_sample_covariance(&z).unwrap();
    let cache = build_cache(&s, &DMatrix::zeros(n, 1), &DVector::zeros(n)).unwrap();
    assert!((cache.q1(0.8) - lim.s).abs() < 0.01);
    assert!((cache.q2(0.8) - lim.s_prime).abs() < 0.02);
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-8 * b.abs().max(1e-3)
}

#[test]
fn xi_estimate_snapshot() {
    let inst = instance(24, 40, &[10, 15], 2_024);
    let cache = build_cache(&inst.s, &inst.x, &inst.y).unwrap();
    let est = evaluate_lambda(&cache, &inst.sizes, cache.tau_bar()).unwrap();
    let expected_beta = [SNAP_BETA_0, SNAP_BETA_1];
    let expected_xi = [SNAP_XI_00, SNAP_XI_01, SNAP_XI_11];
    let got_xi = [est.xi_hat[(0, 0)], est.xi_hat[(0, 1)], est.xi_hat[(1, 1)]];
    for (g, e) in est.beta_hat.iter().zip(expected_beta) {
        assert!(rel_close(*g, e), "beta {g:.17e} vs {e:.17e}");
    }
    for (g, e) in got_xi.iter().zip(expected_xi) {
        assert!(rel_close(*g, e), "xi {g:.17e} vs {e:.17e}");
    }
    assert!(est.feasible);

    // Independent assembly from the functionals.
    let f = cache.functionals(cache.tau_bar()).unwrap();
    let d = DVector::from_vec(vec![0.1, 1.0 / 15.0]);
    let xi = xi_hat(
        &est.beta_hat,
        &d,
        &delta1_hat(&f, &d),
        &delta2_hat(&f, &d, 24, 40),
        k_hat(&f),
    )
    .unwrap();
    assert!((xi - &est.xi_hat).abs().max() < 1e-12);
}

const SNAP_BETA_0: f64 = 1.0862348770788144;
const SNAP_BETA_1: f64 = 0.593760574163682;
const SNAP_XI_00: f64 = 0.8591143111804791;
const SNAP_XI_01: f64 = 0.12425854808075659;
const SNAP_XI_11: f64 = 1.5552491469005802;

#[test]
fn sigma_st_fit_snapshot() {
    let scn = SimulationScenario {
        name: None,
        n_dim: 48,
        true_beta: vec![1.0, 1.0],
        gamma: 1.0,
        ensemble_sizes: vec![35, 46],
        m_runs: 100,
        sigma_model: SigmaModel::SeparableAr1 {
            spatial_dim: 8,
            temporal_dim: 6,
            rho_s: 0.1,
            rho_t: 0.1,
            variances: None,
        },
        true_x: FingerprintModel::Synthetic { seed: 1, correlation: 0.3 },
        replicates: 1,
        base_seed: 77,
        alpha: 0.05,
        grid_size: 100,
        fixed_lambda_factors: vec![],
    };
    let ds = Simulation::<f64>::new(scn).unwrap().generate_replicate(0);
    let fit = fit_optimal(&ds, &FitOptions::default()).unwrap();
    let got = [
        fit.beta_hat[0],
        fit.beta_hat[1],
        fit.lambda_opt,
        fit.intervals[0].0,
        fit.intervals[0].1,
        fit.intervals[1].0,
        fit.intervals[1].1,
    ];
    for (g, e) in got.iter().zip(SNAP_FIT) {
        assert!(rel_close(*g, e), "{got:?}");
    }
}

const SNAP_FIT: [f64; 7] = [
    1.0784428093126543,
    0.8227123917189392,
    9.85314751117486,
    0.8240674102582841,
    1.3328182083670246,
    0.5577589952832518,
    1.0876657881546266,
];
