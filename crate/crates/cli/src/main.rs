//! `mlenkf` command-line harness.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on usage or
//! configuration errors.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use mlenkf::harness::{
    emit_results, fit_loglog_slope, resolve_plan, result_rows, run_replica, selftest,
    with_jobs, write_plan_json, ExperimentConfig, ExperimentData, Method, Qoi,
};
use mlenkf::mlenkf::PlanMode;
use mlenkf::reference::{dmfenkf_run, write_qoi_csv};
use mlenkf::rng::StreamKey;
use mlenkf::Error;

#[derive(Parser, Debug)]
#[command(name = "mlenkf", version, about = "Multilevel ensemble Kalman filtering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one EnKF instance and print its QoI sequence.
    RunEnkf,
    /// Run one MLEnKF estimate and print its QoI sequence.
    RunMlenkf,
    /// Run the density-based mean-field filter and print its QoI sequence.
    RunDmfenkf,
    /// Replicated RMSE-versus-runtime benchmark.
    Benchmark,
    /// Print the resolved MLEnKF plan as JSON.
    Plan,
    /// Quick invariant checks.
    Selftest,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Paper,
    Corollary,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (JSON, or TOML by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single accuracy; replaces the eps grid.
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// enkf, mlenkf, dmfenkf or both.
    #[arg(long, global = true)]
    method: Option<String>,
    #[arg(long, global = true)]
    horizon: Option<usize>,
    #[arg(long, global = true)]
    replicas: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (all cores by default).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Results directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Override a config field, e.g. `--set sigma=0.3` or `--set grid.cells=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, value_enum, global = true)]
    mode: Option<ModeArg>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let jobs = cli.common.jobs;
    let outcome = with_jobs(jobs, || dispatch(&cli)).map_err(Failure::from).and_then(|r| r);
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("mlenkf: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("mlenkf: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    if let Command::Selftest = cli.command {
        return run_selftest();
    }
    let raw = load_config(&cli.common)?;
    let cfg = ExperimentConfig::from_json(raw).map_err(Failure::from)?;
    match cli.command {
        Command::Plan => print_plan(&cfg),
        Command::RunEnkf => run_single(&cfg, Method::Enkf, &cli.common),
        Command::RunMlenkf => run_single(&cfg, Method::Mlenkf, &cli.common),
        Command::RunDmfenkf => run_dmfenkf(&cfg, &cli.common),
        Command::Benchmark => benchmark(&cfg, &cli.common),
        Command::Selftest => unreachable!(),
    }
}

/// Config file, then flags, then `--set` pairs, merged as JSON.
fn load_config(c: &Common) -> Result<Value, Failure> {
    let mut v = match &c.config {
        Some(path) => read_config_file(path)?,
        None => Value::Object(Default::default()),
    };
    let obj = v
        .as_object_mut()
        .ok_or_else(|| Failure::Usage("configuration must be a table of fields".into()))?;
    if let Some(e) = c.eps {
        obj.insert("eps_grid".into(), serde_json::json!([e]));
    }
    if let Some(m) = &c.model {
        obj.insert("model".into(), Value::String(m.clone()));
    }
    if let Some(m) = &c.method {
        obj.insert("method".into(), Value::String(m.to_ascii_lowercase()));
    }
    if let Some(h) = c.horizon {
        obj.insert("horizon".into(), h.into());
    }
    if let Some(r) = c.replicas {
        obj.insert("replicas".into(), r.into());
    }
    if let Some(s) = c.seed {
        obj.insert("master_seed".into(), s.into());
    }
    if let Some(m) = c.mode {
        let mode = match m {
            ModeArg::Paper => PlanMode::Paper,
            ModeArg::Corollary => PlanMode::Corollary,
        };
        obj.insert("mode".into(), serde_json::to_value(mode).expect("plan mode serializes"));
    }
    for pair in &c.overrides {
        apply_override(&mut v, pair)?;
    }
    Ok(v)
}

fn read_config_file(path: &Path) -> Result<Value, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        let t: toml::Value =
            toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
    }
}

/// `a.b=value`: the value is parsed as JSON when possible, else kept as a string.
fn apply_override(v: &mut Value, pair: &str) -> Result<(), Failure> {
    let (key, raw) = pair
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("override `{pair}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = v;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Failure::Usage(format!("bad override key `{key}`")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Failure::Usage(format!("`{key}` does not name a table")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn print_plan(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let plans = cfg
        .eps_grid
        .iter()
        .map(|&eps| match resolve_plan(cfg, Method::Mlenkf, eps)? {
            mlenkf::harness::PlanSummary::Mlenkf(p) => Ok(p),
            _ => unreachable!(),
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let doc = if plans.len() == 1 {
        serde_json::to_string_pretty(&plans[0])
    } else {
        serde_json::to_string_pretty(&plans)
    }
    .expect("plans serialize");
    println!("{doc}");
    Ok(())
}

fn open_sink(output: &Option<PathBuf>, file: &str) -> Result<Box<dyn Write>, Failure> {
    match output {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
            let path = dir.join(file);
            let f = fs::File::create(&path)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            Ok(Box::new(io::BufWriter::new(f)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn write_sequence(sink: &mut dyn Write, cfg: &ExperimentConfig, moments: &[[f64; 2]]) -> io::Result<()> {
    writeln!(sink, "n,qoi_name,value")?;
    for (n, m) in moments.iter().enumerate() {
        for q in &cfg.qois {
            let v = match q {
                Qoi::Mean => m[0],
                Qoi::Variance => m[1] - m[0] * m[0],
            };
            writeln!(sink, "{n},{},{v:?}", q.name())?;
        }
    }
    sink.flush()
}

fn run_single(cfg: &ExperimentConfig, method: Method, c: &Common) -> Result<(), Failure> {
    let eps = cfg.eps_grid[0];
    let problem = cfg.problem()?;
    let synthetic = mlenkf::harness::synthesize_observations(
        &problem.model,
        &problem.obs,
        cfg.horizon,
        cfg.master_seed,
    )?;
    let plan = resolve_plan(cfg, method, eps)?;
    let key = StreamKey::root(cfg.master_seed).child(0x5196);
    let run = run_replica(cfg, &problem, &plan, &synthetic.observations, key)?;
    let mut sink = open_sink(&c.output, &format!("{}.csv", method.name()))?;
    write_sequence(&mut sink, cfg, &run.moments).map_err(|e| Failure::Runtime(e.to_string()))?;
    eprintln!("{} eps={eps} finished in {:.3}s", method.name(), run.seconds);
    Ok(())
}

fn run_dmfenkf(cfg: &ExperimentConfig, c: &Common) -> Result<(), Failure> {
    let problem = cfg.problem()?;
    let synthetic = mlenkf::harness::synthesize_observations(
        &problem.model,
        &problem.obs,
        cfg.horizon,
        cfg.master_seed,
    )?;
    let steps = dmfenkf_run(&problem.model, &problem.obs, &synthetic.observations, &cfg.grid, 0.0, cfg.gamma, &[])?;
    let moments: Vec<[f64; 2]> = steps.iter().map(|s| [s.mean, s.variance + s.mean * s.mean]).collect();
    match &c.output {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
            let rows: Vec<Vec<f64>> = steps.iter().map(|s| vec![s.mean, s.variance]).collect();
            write_qoi_csv(&dir.join("dmfenkf.csv"), &["mean", "variance"], &rows)?;
            if let Some(last) = steps.last() {
                last.updated.write_csv(&dir.join("density.csv"))?;
            }
        }
        None => {
            let mut sink = open_sink(&None, "")?;
            write_sequence(&mut sink, cfg, &moments).map_err(|e| Failure::Runtime(e.to_string()))?;
        }
    }
    Ok(())
}

fn benchmark(cfg: &ExperimentConfig, c: &Common) -> Result<(), Failure> {
    let dir = c.output.clone().unwrap_or_else(|| PathBuf::from("results"));
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let data = ExperimentData::prepare_cached(cfg, &dir.join("reference.csv"))?;
    let mut plans = Vec::new();
    for method in cfg.method.expand() {
        for &eps in &cfg.eps_grid {
            plans.push(resolve_plan(cfg, method, eps)?);
        }
    }
    let config_json = serde_json::to_value(cfg).expect("config serializes");
    write_plan_json(&dir.join("plan.json"), &config_json, &plans)?;

    let mut records = Vec::new();
    for method in cfg.method.expand() {
        for &eps in &cfg.eps_grid {
            let r = mlenkf::harness::benchmark_point(cfg, &data, method, eps)?;
            let errs: Vec<String> =
                r.errors.iter().map(|e| format!("{}={:.4e}", e.qoi.name(), e.rmse)).collect();
            eprintln!("{:<8} eps={:<10} runtime={:>10.3}s  {}", method.name(), eps, r.runtime_s, errs.join(" "));
            records.push(r);
        }
    }
    emit_results(&records, &dir)?;

    let rows = result_rows(&records);
    for method in cfg.method.expand() {
        for q in &cfg.qois {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.method == method && r.qoi == *q)
                .map(|r| (r.runtime_s, r.rmse))
                .collect();
            if let Ok(fit) = fit_loglog_slope(&pts) {
                println!("{} {} slope {:.3}", method.name(), q.name(), fit.slope);
            }
        }
    }
    println!("results written to {}", dir.display());
    Ok(())
}

fn run_selftest() -> Result<(), Failure> {
    let checks = selftest();
    let mut failed = 0;
    for c in &checks {
        match &c.outcome {
            Ok(()) => println!("PASS {}", c.name),
            Err(msg) => {
                failed += 1;
                println!("FAIL {}: {msg}", c.name);
            }
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}
