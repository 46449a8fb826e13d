use mlenkf::harness::fit_loglog_slope;
use mlenkf::models::{simulate_coupled_step, DynamicsModel, NoisePath, Scheme};
use mlenkf::rng::{GaussianSource, StreamKey};
use rayon::prelude::*;

/// Mean of `x` after one unit of time, by Monte Carlo over `paths` paths
/// split into independent chunks.
fn mc_mean(model: &DynamicsModel<f64>, x0: f64, n: usize, paths: usize, seed: u64) -> f64 {
    let chunks = 100;
    let per = paths / chunks;
    let sum: f64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut src = StreamKey::root(seed).child(n as u64).child(c as u64).stream();
            let mut path = NoisePath::zeros(n, 1).unwrap();
            let mut s = 0.0;
            for _ in 0..per {
                path.resample(&mut src);
                let mut u = [x0];
                model.advance(&mut u, &path, Scheme::Milstein).unwrap();
                s += u[0];
            }
            s
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    sum / (chunks * per) as f64
}

#[test]
fn weak_error_is_first_order() {
    let model = DynamicsModel::ornstein_uhlenbeck(0.5).unwrap();
    let x0 = 5.0;
    let exact = x0 * (-1f64).exp();
    let points: Vec<(f64, f64)> = [2usize, 4, 8, 16, 32, 64]
        .iter()
        .map(|&n| (n as f64, (mc_mean(&model, x0, n, 1_000_000, 3) - exact).abs()))
        .collect();
    let fit = fit_loglog_slope(&points).unwrap();
    assert!((fit.slope + 1.0).abs() <= 0.15, "slope {} from {points:?}", fit.slope);
}

#[test]
fn coupled_double_well_gap_shrinks() {
    let model = DynamicsModel::double_well(0.5).unwrap();
    let mut prev = f64::INFINITY;
    for n in [4usize, 16, 64] {
        let mut src = StreamKey::root(9).child(n as u64).stream();
        let mut acc = 0.0;
        let paths = 20_000;
        for _ in 0..paths {
            let u0 = [0.3 * src.standard_normal()];
            let noise = NoisePath::sample(2 * n, 1, &mut src).unwrap();
            let (f, c) = simulate_coupled_step(&model, &u0, &u0, &noise, n, Scheme::Milstein).unwrap();
            acc += (f[0] - c[0]).powi(2);
        }
        let ms = acc / paths as f64;
        assert!(ms < prev / 2.5, "N={n}: {ms} vs {prev}");
        prev = ms;
    }
}
