//! Replicated RMSE-versus-runtime experiments.
//!
//! One experiment synthesizes a single truth path and observation sequence,
//! computes the reference filter moments once, then runs every method at
//! every accuracy `eps` for `replicas` independent filter instances against
//! those frozen observations. Recorded runtime is the sum of per-replica
//! busy times around the filter computation only.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enkf::{
    enkf_parameters, enkf_qoi_run, CovarianceMode, EnkfConfig, EnkfParameters, InitialDistribution,
    ObservationModel, Observable,
};
use crate::error::{Error, Result};
use crate::mlenkf::{ml_plan, mlenkf_estimate_serial, FilterProblem, MLPlan, PlanMode, PlanOptions};
use crate::models::{DynamicsModel, ModelKind, NoisePath, Scheme};
use crate::reference::{
    dmfenkf_run, kalman_run, read_qoi_csv, write_qoi_csv, GaussianState, GridConfig, LinearModel,
};
use crate::rng::{tag, GaussianSource, StreamKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Enkf,
    Mlenkf,
    Dmfenkf,
    /// EnKF and MLEnKF.
    Both,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Enkf => "enkf",
            Method::Mlenkf => "mlenkf",
            Method::Dmfenkf => "dmfenkf",
            Method::Both => "both",
        }
    }

    pub fn expand(self) -> Vec<Method> {
        match self {
            Method::Both => vec![Method::Enkf, Method::Mlenkf],
            m => vec![m],
        }
    }

    fn tag(self) -> u64 {
        match self {
            Method::Enkf | Method::Both => tag::ENKF,
            Method::Mlenkf => tag::MLENKF,
            Method::Dmfenkf => 0xd3f,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "enkf" => Ok(Method::Enkf),
            "mlenkf" => Ok(Method::Mlenkf),
            "dmfenkf" => Ok(Method::Dmfenkf),
            "both" => Ok(Method::Both),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

/// Quantity of interest: the filter mean or variance of the first component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Qoi {
    Mean,
    Variance,
}

impl Qoi {
    pub fn name(self) -> &'static str {
        match self {
            Qoi::Mean => "mean",
            Qoi::Variance => "variance",
        }
    }

    /// Value from the averages of `x` and `x^2`.
    fn of_moments(self, m1: f64, m2: f64) -> f64 {
        match self {
            Qoi::Mean => m1,
            Qoi::Variance => m2 - m1 * m1,
        }
    }
}

impl FromStr for Qoi {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Qoi::Mean),
            "variance" => Ok(Qoi::Variance),
            _ => Err(Error::Config(format!("unknown quantity of interest `{s}`"))),
        }
    }
}

/// Observables every filter evaluates: `x` and `x^2`.
fn moment_observables() -> Vec<Observable<f64>> {
    vec![Observable::first_component(), Observable::first_component_squared()]
}

pub fn default_eps_grid() -> Vec<f64> {
    (4..=8).map(|k| 2f64.powi(-k)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    pub sigma: f64,
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "Gamma")]
    pub gamma: f64,
    pub horizon: usize,
    pub eps_grid: Vec<f64>,
    pub replicas: usize,
    pub qois: Vec<Qoi>,
    pub master_seed: u64,
    pub method: Method,
    pub mode: PlanMode,
    pub alpha: f64,
    pub beta: f64,
    pub scheme: Scheme,
    pub covariance: CovarianceMode,
    /// Density solver settings for the DMFEnKF reference and method.
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: "ou".into(),
            sigma: 0.5,
            h: 1.0,
            gamma: 0.1,
            horizon: 10,
            eps_grid: default_eps_grid(),
            replicas: 100,
            qois: vec![Qoi::Mean],
            master_seed: 0,
            method: Method::Both,
            mode: PlanMode::Paper,
            alpha: 1.0,
            beta: 2.0,
            scheme: Scheme::Milstein,
            covariance: CovarianceMode::Biased,
            grid: GridConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.parse::<ModelKind>().map_err(|e| Error::Config(e.to_string()))?;
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be at least 1".into()));
        }
        if self.eps_grid.is_empty() {
            return Err(Error::Config("eps_grid must not be empty".into()));
        }
        if self.eps_grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("eps_grid must be strictly decreasing".into()));
        }
        if self.eps_grid.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return Err(Error::Config("every eps must lie in (0, 1)".into()));
        }
        if self.qois.is_empty() {
            return Err(Error::Config("at least one quantity of interest is needed".into()));
        }
        if !(self.sigma > 0.0 && self.gamma > 0.0 && self.h.is_finite()) {
            return Err(Error::Config("sigma and Gamma must be positive".into()));
        }
        Ok(())
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        self.model.parse::<ModelKind>().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn dynamics(&self) -> Result<DynamicsModel<f64>> {
        DynamicsModel::by_kind(self.model_kind()?, self.sigma)
    }

    pub fn observation_model(&self) -> Result<ObservationModel<f64>> {
        ObservationModel::scalar(self.h, self.gamma)
    }

    pub fn problem(&self) -> Result<FilterProblem<f64>> {
        let mut p = FilterProblem::new(self.dynamics()?, self.observation_model()?)?;
        p.scheme = self.scheme;
        p.covariance_mode = self.covariance;
        Ok(p)
    }

    pub fn plan_options(&self) -> PlanOptions {
        PlanOptions {
            mode: self.mode,
            ..PlanOptions::default()
        }
    }

    /// Parses a JSON object, filling absent fields with defaults.
    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Truth path `u_0..u_N` and observations `y_1..y_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub truth: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

/// Substeps of the truth path when no exact scheme is available.
pub const TRUTH_SUBSTEPS: usize = 1 << 12;

/// One truth path from `u_0 ~ N(0, Gamma)` and `y_n = H u_n + eta_n`.
pub fn synthesize_observations(
    model: &DynamicsModel<f64>,
    obs: &ObservationModel<f64>,
    horizon: usize,
    seed: u64,
) -> Result<SyntheticData> {
    let mut src = StreamKey::root(seed).child(tag::OBSERVATIONS).stream();
    synthesize_with(model, obs, horizon, &mut src)
}

fn synthesize_with<G: GaussianSource>(
    model: &DynamicsModel<f64>,
    obs: &ObservationModel<f64>,
    horizon: usize,
    src: &mut G,
) -> Result<SyntheticData> {
    let initial = InitialDistribution::from_observation_noise(obs)?;
    let d = model.state_dim();
    let mut u = vec![0.0; d];
    initial.sample_into(src, &mut u);
    let (scheme, n) = if model.has_exact_step() {
        (Scheme::Exact, 1)
    } else {
        (Scheme::Milstein, TRUTH_SUBSTEPS)
    };
    let mut path = NoisePath::zeros(n, d)?;
    let mut eta = vec![0.0; obs.obs_dim()];
    let mut truth = vec![DVector::from_column_slice(&u)];
    let mut observations = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        path.resample(src);
        model.advance(&mut u, &path, scheme)?;
        let state = DVector::from_column_slice(&u);
        obs.draw_perturbation(src, &mut eta);
        observations.push(obs.h() * &state + DVector::from_column_slice(&eta));
        truth.push(state);
    }
    Ok(SyntheticData {
        truth,
        observations,
    })
}

/// FNV-1a over the bit patterns of an observation sequence.
pub fn observation_hash(observations: &[DVector<f64>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for y in observations {
        for v in y.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Reference filter moments `(E[x_n], Var[x_n])` for `n = 0..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSolution {
    pub source: String,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl ReferenceSolution {
    pub fn value(&self, qoi: Qoi, n: usize) -> f64 {
        match qoi {
            Qoi::Mean => self.mean[n],
            Qoi::Variance => self.variance[n],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<Vec<f64>> = self.mean.iter().zip(&self.variance).map(|(&m, &v)| vec![m, v]).collect();
        write_qoi_csv(path, &["mean", "variance"], &rows)
    }

    pub fn read_csv(path: &Path, source: &str) -> Result<Self> {
        let rows = read_qoi_csv(path, &["mean", "variance"])?;
        Ok(ReferenceSolution {
            source: source.into(),
            mean: rows.iter().map(|r| r[0]).collect(),
            variance: rows.iter().map(|r| r[1]).collect(),
        })
    }
}

/// Kalman filter for the OU model, DMFEnKF otherwise.
pub fn compute_reference(cfg: &ExperimentConfig, observations: &[DVector<f64>]) -> Result<ReferenceSolution> {
    let model = cfg.dynamics()?;
    let obs = cfg.observation_model()?;
    if model.kind() == ModelKind::OrnsteinUhlenbeck {
        let lin = LinearModel::ou_exact(cfg.sigma, 1)?;
        let init = GaussianState::scalar(0.0, cfg.gamma)?;
        let states = kalman_run(&init, &lin, &obs, observations)?;
        Ok(ReferenceSolution {
            source: "kalman".into(),
            mean: states.iter().map(|s| s.first_mean()).collect(),
            variance: states.iter().map(|s| s.first_variance()).collect(),
        })
    } else {
        let steps = dmfenkf_run(&model, &obs, observations, &cfg.grid, 0.0, cfg.gamma, &[])?;
        Ok(ReferenceSolution {
            source: "dmfenkf".into(),
            mean: steps.iter().map(|s| s.mean).collect(),
            variance: steps.iter().map(|s| s.variance).collect(),
        })
    }
}

/// Observations and reference shared by every run of an experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub synthetic: SyntheticData,
    pub reference: ReferenceSolution,
}

impl ExperimentData {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let synthetic =
            synthesize_observations(&cfg.dynamics()?, &cfg.observation_model()?, cfg.horizon, cfg.master_seed)?;
        let reference = compute_reference(cfg, &synthetic.observations)?;
        Ok(ExperimentData {
            synthetic,
            reference,
        })
    }

    /// Like [`prepare`](Self::prepare), reusing a reference table at `cache`
    /// when present and writing it there otherwise.
    pub fn prepare_cached(cfg: &ExperimentConfig, cache: &Path) -> Result<Self> {
        cfg.validate()?;
        let synthetic =
            synthesize_observations(&cfg.dynamics()?, &cfg.observation_model()?, cfg.horizon, cfg.master_seed)?;
        let reference = match ReferenceSolution::read_csv(cache, "cache") {
            Ok(r) if r.len() == cfg.horizon + 1 => r,
            _ => {
                let r = compute_reference(cfg, &synthetic.observations)?;
                if let Some(dir) = cache.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                r.write_csv(cache)?;
                r
            }
        };
        Ok(ExperimentData {
            synthetic,
            reference,
        })
    }

    pub fn observations(&self) -> &[DVector<f64>] {
        &self.synthetic.observations
    }
}

/// Parameters a method resolved for one `eps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum PlanSummary {
    Enkf { eps: f64, #[serde(flatten)] params: EnkfParameters },
    Mlenkf(MLPlan),
    Dmfenkf { grid: GridConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QoiError {
    pub qoi: Qoi,
    pub rmse: f64,
    /// Delta-method standard error of the RMSE over replicas.
    pub rmse_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub method: Method,
    pub model: String,
    pub eps: f64,
    /// Sum of per-replica filter times.
    pub runtime_s: f64,
    pub replicas: usize,
    pub seed: u64,
    pub errors: Vec<QoiError>,
    pub plan: PlanSummary,
}

impl BenchmarkRecord {
    pub fn rmse(&self, qoi: Qoi) -> Option<f64> {
        self.errors.iter().find(|e| e.qoi == qoi).map(|e| e.rmse)
    }
}

/// Estimates of `(mu_n[x], mu_n[x^2])` of one replica, and its busy time.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaRun {
    pub moments: Vec<[f64; 2]>,
    pub seconds: f64,
}

/// Stream of replica `r` of a method.
pub fn replica_key(master_seed: u64, method: Method, replica: usize) -> StreamKey {
    StreamKey::root(master_seed)
        .child(method.tag())
        .child(tag::REPLICA)
        .child(replica as u64)
}

pub fn resolve_plan(cfg: &ExperimentConfig, method: Method, eps: f64) -> Result<PlanSummary> {
    match method {
        Method::Enkf => Ok(PlanSummary::Enkf {
            eps,
            params: enkf_parameters(eps, cfg.alpha)?,
        }),
        Method::Mlenkf => Ok(PlanSummary::Mlenkf(ml_plan(eps, cfg.alpha, cfg.beta, &cfg.plan_options())?)),
        Method::Dmfenkf => Ok(PlanSummary::Dmfenkf { grid: cfg.grid }),
        Method::Both => Err(Error::Config("`both` is not a single method".into())),
    }
}

/// Runs one replica of a resolved method.
pub fn run_replica(
    cfg: &ExperimentConfig,
    problem: &FilterProblem<f64>,
    plan: &PlanSummary,
    observations: &[DVector<f64>],
    key: StreamKey,
) -> Result<ReplicaRun> {
    let phis = moment_observables();
    let start = Instant::now();
    let values = match plan {
        PlanSummary::Enkf { params, .. } => {
            let mut ec = EnkfConfig::new(params.n_substeps, params.ensemble_size);
            ec.scheme = problem.scheme;
            ec.covariance_mode = problem.covariance_mode;
            let mut src = key.stream();
            enkf_qoi_run(&ec, &problem.model, &problem.obs, observations, &problem.initial, &phis, &mut src)?
        }
        PlanSummary::Mlenkf(p) => mlenkf_estimate_serial(p, problem, observations, &phis, key)?,
        PlanSummary::Dmfenkf { grid } => {
            let steps = dmfenkf_run(&problem.model, &problem.obs, observations, grid, 0.0, cfg.gamma, &phis)?;
            steps.into_iter().map(|s| s.qoi).collect()
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    Ok(ReplicaRun {
        moments: values.into_iter().map(|v| [v[0], v[1]]).collect(),
        seconds,
    })
}

/// All replicas of one method at one `eps`, in replica order.
pub fn run_replicas(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    method: Method,
    eps: f64,
) -> Result<(PlanSummary, Vec<ReplicaRun>)> {
    let problem = cfg.problem()?;
    let plan = resolve_plan(cfg, method, eps)?;
    let obs = data.observations();
    let runs = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| run_replica(cfg, &problem, &plan, obs, replica_key(cfg.master_seed, method, r)))
        .collect::<Result<Vec<_>>>()?;
    Ok((plan, runs))
}

/// RMSE of one QoI over replicas and times `n = 0..=N`, with its standard error.
pub fn rmse_of(runs: &[ReplicaRun], reference: &ReferenceSolution, qoi: Qoi) -> Result<(f64, f64)> {
    if runs.is_empty() {
        return Err(Error::invalid("no replicas"));
    }
    let per_replica: Vec<f64> = runs
        .iter()
        .map(|run| {
            if run.moments.len() != reference.len() {
                return Err(Error::MissingReference(format!(
                    "reference covers {} times, filter produced {}",
                    reference.len(),
                    run.moments.len()
                )));
            }
            let sq = run
                .moments
                .iter()
                .enumerate()
                .map(|(n, m)| {
                    let e = qoi.of_moments(m[0], m[1]) - reference.value(qoi, n);
                    e * e
                })
                .sum::<f64>();
            Ok(sq / run.moments.len() as f64)
        })
        .collect::<Result<_>>()?;
    let r = per_replica.len() as f64;
    let mse = per_replica.iter().sum::<f64>() / r;
    let rmse = mse.sqrt();
    let se = if per_replica.len() > 1 && rmse > 0.0 {
        let var = per_replica.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (r - 1.0);
        (var / r).sqrt() / (2.0 * rmse)
    } else {
        0.0
    };
    Ok((rmse, se))
}

/// Benchmark record of one method at one `eps`.
pub fn benchmark_point(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    method: Method,
    eps: f64,
) -> Result<BenchmarkRecord> {
    let (plan, runs) = run_replicas(cfg, data, method, eps)?;
    let errors = cfg
        .qois
        .iter()
        .map(|&qoi| {
            let (rmse, rmse_se) = rmse_of(&runs, &data.reference, qoi)?;
            Ok(QoiError { qoi, rmse, rmse_se })
        })
        .collect::<Result<Vec<_>>>()?;
    // Runs that finish below the clock resolution still count as positive work.
    let runtime_s = runs.iter().map(|r| r.seconds).sum::<f64>().max(1e-9);
    Ok(BenchmarkRecord {
        method,
        model: cfg.model.clone(),
        eps,
        runtime_s,
        replicas: cfg.replicas,
        seed: cfg.master_seed,
        errors,
        plan,
    })
}

/// Every method of `cfg` over its `eps` grid, against precomputed data.
pub fn rmse_experiment_with(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Vec<BenchmarkRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for method in cfg.method.expand() {
        for &eps in &cfg.eps_grid {
            out.push(benchmark_point(cfg, data, method, eps)?);
        }
    }
    Ok(out)
}

/// Synthesizes data, computes the reference, then runs the benchmark.
pub fn rmse_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentData, Vec<BenchmarkRecord>)> {
    let data = ExperimentData::prepare(cfg)?;
    let records = rmse_experiment_with(cfg, &data)?;
    Ok((data, records))
}

/// Runs `f` on a pool of `jobs` workers (all cores when `None`).
pub fn with_jobs<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        b = b.num_threads(j);
    }
    let pool = b.build().map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
}

impl LogLogFit {
    pub fn eval(&self, x: f64) -> f64 {
        (self.intercept + self.slope * x.ln()).exp()
    }
}

/// Least squares fit of `ln y = intercept + slope ln x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 2 {
        return Err(Error::invalid("a slope fit needs at least two points"));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(Error::invalid("log-log fit needs positive finite points"));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 1e-300 * n || lx.iter().all(|&x| x == lx[0]) {
        return Err(Error::DegenerateRegression("all abscissae are equal"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(LogLogFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// One CSV row: a record restricted to one QoI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub model: String,
    pub qoi: Qoi,
    pub eps: f64,
    pub runtime_s: f64,
    pub rmse: f64,
    pub seed: u64,
}

pub fn result_rows(records: &[BenchmarkRecord]) -> Vec<ResultRow> {
    records
        .iter()
        .flat_map(|r| {
            r.errors.iter().map(move |e| ResultRow {
                method: r.method,
                model: r.model.clone(),
                qoi: e.qoi,
                eps: r.eps,
                runtime_s: r.runtime_s,
                rmse: e.rmse,
                seed: r.seed,
            })
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Log-log RMSE-versus-runtime plot with one polyline per method and guide
/// lines of slopes -1/3 and -1/2.
pub fn render_svg(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let (w, h, pad) = (640.0, 480.0, 60.0);
    let lx: Vec<f64> = rows.iter().map(|r| r.runtime_s.max(1e-12).log10()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.rmse.max(1e-300).log10()).collect();
    let bounds = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            let m = 0.05 * (hi - lo);
            (lo - m, hi + m)
        }
    };
    let (x0, x1) = bounds(&lx);
    let (y0, y1) = bounds(&ly);
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<line class=\"axis\" x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line class=\"axis\" x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = h - pad,
        r = w - pad
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">log10 runtime [s]</text>\n",
        w / 2.0,
        h - 15.0
    ));
    s.push_str(&format!(
        "<text x=\"15\" y=\"{}\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">log10 RMSE</text>\n",
        h / 2.0,
        h / 2.0
    ));

    let mut series: Vec<(Method, Qoi)> = Vec::new();
    for r in rows {
        if !series.contains(&(r.method, r.qoi)) {
            series.push((r.method, r.qoi));
        }
    }
    for (k, (method, qoi)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts: Vec<(f64, f64)> = rows
            .iter()
            .zip(lx.iter().zip(&ly))
            .filter(|(r, _)| r.method == *method && r.qoi == *qoi)
            .map(|(_, (&x, &y))| (px(x), py(y)))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        s.push_str(&format!(
            "<polyline class=\"series\" data-method=\"{method}\" data-qoi=\"{}\" fill=\"none\" stroke=\"{color}\" points=\"{}\"/>\n",
            qoi.name(),
            coords.join(" ")
        ));
        for (x, y) in &pts {
            s.push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\"/>\n"));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{method} ({})</text>\n",
            w - pad - 120.0,
            pad + 16.0 * k as f64,
            qoi.name()
        ));
    }

    // Guides start at the top-left data corner and span half the x range.
    let gx0 = x0 + 0.1 * (x1 - x0);
    let gx1 = x0 + 0.6 * (x1 - x0);
    let gy0 = y1 - 0.1 * (y1 - y0);
    for (label, slope) in [("1/3", 1.0 / 3.0), ("1/2", 0.5)] {
        let gy1 = gy0 - slope * (gx1 - gx0);
        s.push_str(&format!(
            "<line class=\"guide\" data-slope=\"-{label}\" x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n",
            px(gx0),
            py(gy0),
            px(gx1),
            py(gy1)
        ));
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" fill=\"gray\">slope -{label}</text>\n",
            px(gx1) + 4.0,
            py(gy1)
        ));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `records.csv` and `plot.svg` under `dir`.
pub fn emit_results(records: &[BenchmarkRecord], dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no benchmark records to emit"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows = result_rows(records);
    write_csv(&dir.join("records.csv"), &rows)?;
    let svg = render_svg(&rows)?;
    let path = dir.join("plot.svg");
    fs::write(&path, svg).map_err(|e| Error::io(&path, e))
}

/// Writes `{"config": ..., "plans": [...]}`.
pub fn write_plan_json(path: &Path, config: &serde_json::Value, plans: &[PlanSummary]) -> Result<()> {
    let doc = serde_json::json!({ "config": config, "plans": plans });
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Outcome of one quick self-check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub outcome: std::result::Result<(), String>,
}

fn check(name: &'static str, f: impl FnOnce() -> std::result::Result<(), String>) -> Check {
    Check { name, outcome: f() }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Fast invariant checks run by the `selftest` command.
pub fn selftest() -> Vec<Check> {
    use crate::enkf::{sample_covariance, EnsembleState, Phase};
    use crate::mlenkf::{coupled_step_audited, CoupledLevelState, CouplingAudit};
    use crate::rng::RngStream;

    let e = |err: Error| err.to_string();
    vec![
        check("plan reproduction", || {
            let p = ml_plan(0.0625, 1.0, 2.0, &PlanOptions::default()).map_err(e)?;
            ensure(
                p.L == 3
                    && p.N_levels == [2, 4, 8, 16]
                    && p.P_levels == [10, 20, 40, 80]
                    && p.M_levels == [576, 72, 18, 5],
                || format!("got {p:?}"),
            )
        }),
        check("noise coarsening", || {
            let mut src = RngStream::from_seed(1);
            let fine = NoisePath::<f64>::sample(16, 1, &mut src).map_err(e)?;
            let coarse = fine.coarsen(4).map_err(e)?;
            let ok = (0..4).all(|k| {
                let s: f64 = (0..4).map(|j| fine.increment(4 * k + j)[0]).sum();
                (s - coarse.increment(k)[0]).abs() < 1e-15
            });
            ensure(ok && (fine.component_total(0) - coarse.component_total(0)).abs() < 1e-14, || {
                "coarse increments are not sums of fine ones".into()
            })
        }),
        check("perturbation sharing", || {
            let problem = ExperimentConfig::default().problem().map_err(e)?;
            let mut src = RngStream::from_seed(2);
            let mut st = CoupledLevelState::initial(1, 4, 2, 20, &problem.initial, &mut src).map_err(e)?;
            let mut audit = CouplingAudit::default();
            coupled_step_audited(
                &mut st,
                &problem.model,
                &problem.obs,
                &DVector::from_element(1, 0.2),
                Scheme::Milstein,
                CovarianceMode::Biased,
                &mut src,
                &mut audit,
            )
            .map_err(e)?;
            let fine: Vec<_> = audit.perturbations.iter().filter(|p| p.1 == 0).collect();
            let ok = fine.iter().all(|f| {
                audit
                    .perturbations
                    .iter()
                    .any(|c| c.1 != 0 && c.2 == f.2 && c.3 == f.3)
            });
            ensure(ok && fine.len() == 20, || "fine and coarse perturbations differ".into())
        }),
        check("covariance normalization", || {
            let ens = EnsembleState::from_scalars(&[0.3, -1.2, 2.0, 0.7, 0.1], 0, Phase::Prediction).map_err(e)?;
            let b: f64 = sample_covariance(&ens, CovarianceMode::Biased).map_err(e)?[(0, 0)];
            let u = sample_covariance(&ens, CovarianceMode::Unbiased).map_err(e)?[(0, 0)];
            ensure((u - b * 5.0 / 4.0).abs() < 1e-14, || format!("biased {b}, unbiased {u}"))
        }),
        check("unit observable", || {
            let cfg = ExperimentConfig::default();
            let problem = cfg.problem().map_err(e)?;
            let plan = ml_plan(0.25, 1.0, 2.0, &PlanOptions::default()).map_err(e)?;
            let obs: Vec<_> = (0..3).map(|k| DVector::from_element(1, 0.1 * k as f64)).collect();
            let est = crate::mlenkf::mlenkf_estimate(
                &plan,
                &problem,
                &obs,
                &[Observable::constant(1.0)],
                StreamKey::root(3),
            )
            .map_err(e)?;
            ensure(est.iter().all(|v| (v[0] - 1.0).abs() < 1e-12), || format!("{est:?}"))
        }),
        check("worker-count determinism", || {
            let cfg = ExperimentConfig {
                eps_grid: vec![0.25, 0.125],
                replicas: 4,
                horizon: 3,
                ..ExperimentConfig::default()
            };
            let data = ExperimentData::prepare(&cfg).map_err(e)?;
            let one = with_jobs(Some(1), || rmse_experiment_with(&cfg, &data)).map_err(e)?.map_err(e)?;
            let four = with_jobs(Some(4), || rmse_experiment_with(&cfg, &data)).map_err(e)?.map_err(e)?;
            let strip = |r: &[BenchmarkRecord]| r.iter().map(|x| x.errors.clone()).collect::<Vec<_>>();
            ensure(strip(&one) == strip(&four), || "results depend on the worker count".into())
        }),
        check("slope fit", || {
            let pts: Vec<_> = (0..5).map(|k| (10f64.powi(k), 10f64.powf(-k as f64 / 3.0))).collect();
            let fit = fit_loglog_slope(&pts).map_err(e)?;
            ensure((fit.slope + 1.0 / 3.0).abs() < 1e-12, || format!("slope {}", fit.slope))
        }),
    ]
}
