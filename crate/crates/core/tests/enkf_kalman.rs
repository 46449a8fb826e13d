use mlenkf::enkf::{enkf_qoi_run, EnkfConfig, InitialDistribution, ObservationModel, Observable};
use mlenkf::harness::{fit_loglog_slope, synthesize_observations};
use mlenkf::models::{DynamicsModel, Scheme};
use mlenkf::reference::{kalman_run, GaussianState, LinearModel};
use mlenkf::rng::StreamKey;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

const SIGMA: f64 = 0.5;

fn setup(d: usize, horizon: usize) -> (DynamicsModel<f64>, ObservationModel<f64>, Vec<DVector<f64>>) {
    let model = DynamicsModel::ornstein_uhlenbeck(SIGMA).unwrap().with_state_dim(d).unwrap();
    let obs = ObservationModel::new(DMatrix::identity(d, d), DMatrix::identity(d, d) * 0.1).unwrap();
    let data = synthesize_observations(&model, &obs, horizon, 3).unwrap();
    (model, obs, data.observations)
}

fn exact(n: usize, p: usize) -> EnkfConfig {
    EnkfConfig {
        scheme: Scheme::Exact,
        ..EnkfConfig::new(n, p)
    }
}

#[test]
fn large_ensemble_follows_kalman_filter() {
    let (model, obs, ys) = setup(1, 10);
    let initial = InitialDistribution::from_observation_noise(&obs).unwrap();
    let p = 100_000;
    let got = enkf_qoi_run(
        &exact(1, p),
        &model,
        &obs,
        &ys,
        &initial,
        &[Observable::first_component()],
        &mut StreamKey::root(9).stream(),
    )
    .unwrap();
    let kf = kalman_run(
        &GaussianState::scalar(0.0, 0.1).unwrap(),
        &LinearModel::ou_exact(SIGMA, 1).unwrap(),
        &obs,
        &ys,
    )
    .unwrap();
    for (n, (g, k)) in got.iter().zip(&kf).enumerate() {
        let tol = 4.0 * k.first_variance().sqrt() / (p as f64).sqrt();
        assert!((g[0] - k.first_mean()).abs() <= tol, "n={n}: {} vs {}", g[0], k.first_mean());
    }
}

#[test]
fn two_dimensional_filter_follows_kalman_filter() {
    let (model, obs, ys) = setup(2, 5);
    let initial = InitialDistribution::from_observation_noise(&obs).unwrap();
    let p = 50_000;
    let phis = [Observable::new("x1", |v: &[f64]| v[0]), Observable::new("x2", |v: &[f64]| v[1])];
    let got = enkf_qoi_run(&exact(1, p), &model, &obs, &ys, &initial, &phis, &mut StreamKey::root(10).stream())
        .unwrap();
    let prior = GaussianState::new(DVector::zeros(2), DMatrix::identity(2, 2) * 0.1, 0).unwrap();
    let kf = kalman_run(&prior, &LinearModel::ou_exact(SIGMA, 2).unwrap(), &obs, &ys).unwrap();
    for (n, (g, k)) in got.iter().zip(&kf).enumerate() {
        for (j, gj) in g.iter().enumerate() {
            let tol = 4.0 * k.cov[(j, j)].sqrt() / (p as f64).sqrt();
            assert!((gj - k.mean[j]).abs() <= tol, "n={n}, j={j}: {gj} vs {}", k.mean[j]);
        }
    }
}

/// With exact dynamics only the statistical error remains: RMSE ~ P^{-1/2}.
#[test]
fn ensemble_error_decays_at_half_rate() {
    let (model, obs, ys) = setup(1, 5);
    let initial = InitialDistribution::from_observation_noise(&obs).unwrap();
    let kf = kalman_run(
        &GaussianState::scalar(0.0, 0.1).unwrap(),
        &LinearModel::ou_exact(SIGMA, 1).unwrap(),
        &obs,
        &ys,
    )
    .unwrap();
    let target = kf[5].first_mean();
    let reps = 40;
    let points: Vec<(f64, f64)> = [100usize, 1_000, 10_000, 100_000]
        .iter()
        .map(|&p| {
            let mse = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let mut src = StreamKey::root(p as u64).child(r).stream();
                    let q = enkf_qoi_run(&exact(1, p), &model, &obs, &ys, &initial, &[Observable::first_component()], &mut src)
                        .unwrap();
                    (q[5][0] - target).powi(2)
                })
                .sum::<f64>()
                / reps as f64;
            (p as f64, mse.sqrt())
        })
        .collect();
    let fit = fit_loglog_slope(&points).unwrap();
    assert!((fit.slope + 0.5).abs() <= 0.1, "slope {} from {points:?}", fit.slope);
}
