use mlenkf::harness::{
    benchmark_point, emit_results, fit_loglog_slope, observation_hash, read_csv, render_svg,
    replica_key, resolve_plan, result_rows, rmse_experiment_with, run_replica, run_replicas,
    synthesize_observations, write_csv, ExperimentConfig, ExperimentData, Method, Qoi,
    ReferenceSolution,
};
use mlenkf::models::DynamicsModel;
use mlenkf::Error;
use serde_json::json;

fn small_cfg() -> ExperimentConfig {
    ExperimentConfig {
        eps_grid: vec![0.0625, 0.03125],
        replicas: 4,
        horizon: 5,
        ..ExperimentConfig::default()
    }
}

#[test]
fn slope_of_exact_power_law_is_recovered() {
    let pts: Vec<(f64, f64)> = (0..6).map(|k| 10f64.powi(k)).map(|x| (x, 3.0 * x.powf(-1.0 / 3.0))).collect();
    let fit = fit_loglog_slope(&pts).unwrap();
    assert!((fit.slope + 1.0 / 3.0).abs() < 1e-12);
    assert!((fit.eval(1e3) - 0.3).abs() < 1e-12);
}

/// `x^{-1/2} ln x` looks like a rate slightly slower than one half.
#[test]
fn logarithmic_factor_bends_slope_toward_zero() {
    let pts: Vec<(f64, f64)> = (3..=8).map(|k| 10f64.powi(k)).map(|x| (x, x.powf(-0.5) * x.ln())).collect();
    let s = fit_loglog_slope(&pts).unwrap().slope;
    assert!(s > -0.55 && s < -0.35, "{s}");
}

#[test]
fn degenerate_fits_are_errors() {
    assert!(fit_loglog_slope(&[(1.0, 1.0)]).is_err());
    assert!(matches!(
        fit_loglog_slope(&[(2.0, 1.0), (2.0, 3.0), (2.0, 0.5)]),
        Err(Error::DegenerateRegression(_))
    ));
    assert!(fit_loglog_slope(&[(1.0, 0.0), (2.0, 1.0)]).is_err());
}

#[test]
fn config_rejects_unknown_fields_and_bad_grids() {
    assert!(ExperimentConfig::from_json(json!({"bogus": 1})).is_err());
    assert!(ExperimentConfig::from_json(json!({"eps_grid": []})).is_err());
    assert!(ExperimentConfig::from_json(json!({"eps_grid": [0.1, 0.2]})).is_err());
    assert!(ExperimentConfig::from_json(json!({"replicas": 0})).is_err());
    assert!(ExperimentConfig::from_json(json!({"model": "lorenz"})).is_err());
    let cfg = ExperimentConfig::from_json(json!({"model": "double-well", "qois": ["mean", "variance"]})).unwrap();
    assert_eq!(cfg.qois, vec![Qoi::Mean, Qoi::Variance]);
    assert_eq!(cfg.replicas, 100);
}

#[test]
fn observations_are_frozen_by_seed() {
    let cfg = small_cfg();
    let a = ExperimentData::prepare(&cfg).unwrap();
    let b = ExperimentData::prepare(&cfg).unwrap();
    assert_eq!(observation_hash(a.observations()), observation_hash(b.observations()));
    let c = ExperimentData::prepare(&ExperimentConfig { master_seed: 1, ..cfg }).unwrap();
    assert_ne!(observation_hash(a.observations()), observation_hash(c.observations()));
    assert_eq!(a.observations().len(), 5);
    assert_eq!(a.reference.len(), 6);
}

#[test]
fn cached_reference_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ref").join("reference.csv");
    let cfg = small_cfg();
    let a = ExperimentData::prepare_cached(&cfg, &path).unwrap();
    assert!(path.exists());
    let b = ExperimentData::prepare_cached(&cfg, &path).unwrap();
    assert_eq!(a.reference.mean, b.reference.mean);
    assert_eq!(a.reference.variance, b.reference.variance);
    let c = ReferenceSolution::read_csv(&path, "x").unwrap();
    assert_eq!(c.mean, a.reference.mean);
}

#[test]
fn ou_truth_has_unit_time_autocorrelation() {
    let model = DynamicsModel::ornstein_uhlenbeck(0.5).unwrap();
    let obs = mlenkf::enkf::ObservationModel::scalar(1.0, 0.1).unwrap();
    let data = synthesize_observations(&model, &obs, 10_000, 7).unwrap();
    let x: Vec<f64> = data.truth.iter().map(|u| u[0]).collect();
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let c0 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    let c1 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum::<f64>();
    let rho = c1 / c0;
    assert!((rho - (-1f64).exp()).abs() < 0.02, "{rho}");
}

#[test]
fn replica_runs_alone_as_in_a_batch() {
    let cfg = small_cfg();
    let data = ExperimentData::prepare(&cfg).unwrap();
    for method in [Method::Enkf, Method::Mlenkf] {
        let (plan, batch) = run_replicas(&cfg, &data, method, 0.0625).unwrap();
        let alone = run_replica(&cfg, &cfg.problem().unwrap(), &plan, data.observations(), replica_key(0, method, 2))
            .unwrap();
        assert_eq!(alone.moments, batch[2].moments);
        assert_eq!(batch[0].moments.len(), cfg.horizon + 1);
        assert_ne!(batch[0].moments, batch[1].moments);
    }
}

#[test]
fn benchmark_is_deterministic() {
    let cfg = small_cfg();
    let data = ExperimentData::prepare(&cfg).unwrap();
    let a = rmse_experiment_with(&cfg, &data).unwrap();
    let b = rmse_experiment_with(&cfg, &data).unwrap();
    assert_eq!(a.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.errors, y.errors);
        assert_eq!(x.plan, y.plan);
    }
}

/// On the double-well the reference is itself the DMFEnKF on the same grid.
#[test]
fn dmfenkf_against_its_own_reference_has_zero_error() {
    let cfg = ExperimentConfig {
        model: "double-well".into(),
        horizon: 3,
        replicas: 1,
        qois: vec![Qoi::Mean, Qoi::Variance],
        ..small_cfg()
    };
    let data = ExperimentData::prepare(&cfg).unwrap();
    assert_eq!(data.reference.source, "dmfenkf");
    let rec = benchmark_point(&cfg, &data, Method::Dmfenkf, 0.0625).unwrap();
    assert!(rec.rmse(Qoi::Mean).unwrap() < 1e-12);
    assert!(rec.rmse(Qoi::Variance).unwrap() < 1e-12);
}

#[test]
fn doubling_replicas_agrees_within_standard_errors() {
    let cfg = ExperimentConfig {
        replicas: 50,
        ..small_cfg()
    };
    let data = ExperimentData::prepare(&cfg).unwrap();
    let a = benchmark_point(&cfg, &data, Method::Enkf, 0.0625).unwrap();
    let b = benchmark_point(&ExperimentConfig { replicas: 100, ..cfg }, &data, Method::Enkf, 0.0625).unwrap();
    let (ea, eb) = (&a.errors[0], &b.errors[0]);
    let tol = 3.0 * (ea.rmse_se.powi(2) + eb.rmse_se.powi(2)).sqrt();
    assert!((ea.rmse - eb.rmse).abs() < tol, "{} vs {} (tol {tol})", ea.rmse, eb.rmse);
    assert!(eb.rmse_se < ea.rmse_se);
}

#[test]
fn csv_and_svg_outputs() {
    let cfg = small_cfg();
    let data = ExperimentData::prepare(&cfg).unwrap();
    let records = rmse_experiment_with(&cfg, &data).unwrap();
    let rows = result_rows(&records);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rows.csv");
    write_csv(&path, &rows).unwrap();
    assert_eq!(read_csv(&path).unwrap(), rows);
    let header = std::fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("method,model,qoi,eps,runtime_s,rmse,seed"));

    let svg = render_svg(&rows).unwrap();
    assert_eq!(svg.matches("class=\"series\"").count(), 2);
    assert!(svg.contains("data-method=\"enkf\""));
    assert!(svg.contains("data-method=\"mlenkf\""));
    assert!(svg.contains("data-slope=\"-1/3\""));
    assert!(svg.contains("data-slope=\"-1/2\""));

    emit_results(&records, &dir.path().join("out")).unwrap();
    assert!(dir.path().join("out/records.csv").exists());
    assert!(dir.path().join("out/plot.svg").exists());
    assert!(emit_results(&[], dir.path()).is_err());
    assert!(render_svg(&[]).is_err());
}

#[test]
fn both_is_not_a_single_method() {
    let cfg = small_cfg();
    assert!(resolve_plan(&cfg, Method::Both, 0.0625).is_err());
    assert_eq!(Method::Both.expand(), vec![Method::Enkf, Method::Mlenkf]);
}
