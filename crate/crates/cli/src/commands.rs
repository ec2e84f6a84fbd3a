//! The four subcommands. Each returns the text to print on standard output.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gpfield_core::dynamics::{
    angular_momentum, hamiltonian, integrate, sample_trajectory_to_data, IntegratorConfig, Kepler, Spiral, Trajectory,
};
use gpfield_core::pipeline::{evaluate_errors, learn_vector_field, sample_uncertain_rollout, LearnedField, SamplerConfig};
use serde::Serialize;

use crate::config::{GridKind, IntegratorKind, RunConfig, SystemConfig};
use crate::csv_io::{read_trajectory, std_columns, write_series, write_trajectory};
use crate::error::{CliError, CliResult};
use crate::fsutil::write_atomic;
use crate::model_file::ModelFile;

#[derive(Debug, Parser)]
#[command(name = "gpfield", version, about = "Learn vector fields from trajectories with sparse GPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the configured system and write a trajectory CSV.
    Simulate(SimulateArgs),
    /// Learn a vector field from a trajectory and write a model file.
    Train(TrainArgs),
    /// Integrate a learned model and write the trajectory CSV.
    Rollout(RolloutArgs),
    /// Compare a rollout with a reference and print a JSON report.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Time span `t0,t1`; overrides the config.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub span: Option<Vec<f64>>,
    /// Number of samples; overrides the config.
    #[arg(long)]
    pub n: Option<usize>,
    /// Noise std; overrides the config.
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long, value_enum)]
    pub grid: Option<GridKind>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Trajectory CSV; defaults to the config's trajectory output or
    /// external CSV path.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initial state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    /// Time span `t0,t1`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub span: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub integrator: Option<IntegratorKind>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Points in the written trajectory.
    #[arg(long)]
    pub n_out: Option<usize>,
    /// Number of sampled paths for the uncertainty estimate.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub memory_cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Integral {
    Hamiltonian,
    #[value(name = "angular_momentum")]
    AngularMomentum,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub rollout: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// End of the training window; defaults to the end of the config's
    /// data span.
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = gpfield_core::pipeline::DEFAULT_EVAL_POINTS)]
    pub n_eval: usize,
    /// First integrals to compute along the rollout (4-D states only).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub integrals: Vec<Integral>,
    #[arg(long, default_value_t = 1.0)]
    pub nu: f64,
    /// CSV for the integral series `t,H,J`.
    #[arg(long)]
    pub integrals_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Train(a) => train(&a),
        Command::Rollout(a) => rollout(&a),
        Command::Evaluate(a) => evaluate(&a),
    }
}

fn require_out(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| CliError::config(format!("no output path for the {what}; pass --out")))
}

fn span_arg(span: &Option<Vec<f64>>) -> CliResult<Option<(f64, f64)>> {
    match span.as_deref() {
        None => Ok(None),
        Some([a, b]) if b > a => Ok(Some((*a, *b))),
        Some(_) => Err(CliError::config("--span needs t0,t1 with t0 < t1")),
    }
}

fn to_json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("report serializes")
}

pub fn simulate(a: &SimulateArgs) -> CliResult<String> {
    let cfg = RunConfig::load(&a.config)?;
    let out = require_out(&a.out, &cfg.outputs.trajectory, "trajectory")?;
    let x0 = cfg.data_x0()?;
    let span = match span_arg(&a.span)? {
        Some(s) => s,
        None => cfg.data_span()?,
    };
    let n = a.n.unwrap_or(cfg.data.n);
    let noise = a.noise_std.unwrap_or(cfg.data.noise_std);
    let seed = a.seed.unwrap_or(cfg.data.seed);
    let grid = a.grid.unwrap_or(cfg.data.grid).into();
    if n < 2 {
        return Err(CliError::config("need at least two samples"));
    }
    if !(noise >= 0.0) {
        return Err(CliError::config("noise std must be non-negative"));
    }
    let traj = match &cfg.system {
        SystemConfig::Spiral => sample_trajectory_to_data(&Spiral, &x0, span, n, noise, seed, grid)?,
        SystemConfig::Kepler { nu } => sample_trajectory_to_data(&Kepler { nu: *nu }, &x0, span, n, noise, seed, grid)?,
        SystemConfig::ExternalCsv { .. } => {
            return Err(CliError::config("external_csv systems cannot be simulated"));
        }
    };
    write_trajectory(&out, &traj)?;
    Ok(String::new())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    nll: f64,
    hyperparameters: &'a [f64],
    noise_std: f64,
    n_trajectory_points: usize,
    n_fixed_points: usize,
    optimizer_evaluations: usize,
    optimizer_converged: bool,
}

pub fn train(a: &TrainArgs) -> CliResult<String> {
    let cfg = RunConfig::load(&a.config)?;
    let out = require_out(&a.out, &cfg.outputs.model, "model")?;
    let data = match (&a.data, &cfg.system, &cfg.outputs.trajectory) {
        (Some(p), _, _) => p.clone(),
        (None, SystemConfig::ExternalCsv { path, .. }, _) => path.clone(),
        (None, _, Some(p)) => p.clone(),
        _ => return Err(CliError::config("no trajectory file; pass --data")),
    };
    let seed = a.seed.unwrap_or(cfg.data.seed);
    let traj = read_trajectory(&data)?;
    if traj.dim() != cfg.state_dim() {
        return Err(CliError::format(
            &data,
            format!("trajectory has {} components, the system has {}", traj.dim(), cfg.state_dim()),
        ));
    }
    let field = learn_vector_field(&traj, &cfg.learn_config(seed)?)?;
    let file = ModelFile::from_field(&field, cfg.hash(), seed);
    file.save(&out)?;
    let m = field.metadata();
    Ok(to_json_line(&TrainReport {
        nll: m.nll,
        hyperparameters: &m.hyperparams,
        noise_std: m.noise_std,
        n_trajectory_points: m.n_trajectory_points,
        n_fixed_points: m.n_fixed_points,
        optimizer_evaluations: m.optimizer_evaluations,
        optimizer_converged: m.optimizer_converged,
    }))
}

/// `out.csv` → `out.<suffix>.csv`.
pub fn sibling_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    out.with_file_name(format!("{stem}.{suffix}.{ext}"))
}

pub fn load_field(path: &Path) -> CliResult<LearnedField> {
    ModelFile::load(path)?.to_field().map_err(|e| CliError::format(path, e))
}

pub fn rollout(a: &RolloutArgs) -> CliResult<String> {
    let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
    let out = require_out(&a.out, &cfg.as_ref().and_then(|c| c.outputs.rollout.clone()), "rollout")?;
    if let Some(n) = a.samples {
        if n < 2 {
            return Err(CliError::config("--samples needs at least 2 paths"));
        }
    }
    let field = load_field(&a.model)?;
    let x0 = match (&a.x0, &cfg) {
        (Some(x), _) => x.clone(),
        (None, Some(c)) => c.rollout_x0()?,
        (None, None) => return Err(CliError::config("pass --x0 or --config")),
    };
    if x0.len() != field.state_dim() {
        return Err(CliError::config(format!(
            "x0 has {} components, the model state has {}",
            x0.len(),
            field.state_dim()
        )));
    }
    let span = match (span_arg(&a.span)?, &cfg) {
        (Some(s), _) => s,
        (None, Some(c)) => c.rollout_span()?,
        (None, None) => return Err(CliError::config("pass --span or --config")),
    };
    let defaults = cfg.as_ref().map(|c| c.rollout.clone()).unwrap_or_default();
    let method = a.integrator.unwrap_or(defaults.integrator);
    let dt = a.dt.unwrap_or(defaults.dt);
    let n_out = a.n_out.unwrap_or(defaults.n_out);
    if !(dt > 0.0) || n_out < 2 {
        return Err(CliError::config("--dt must be positive and --n-out at least 2"));
    }
    let traj = integrate(&field, &x0, span, &IntegratorConfig::new(method.into(), dt))?;
    write_trajectory(&out, &traj.resample(span.0, span.1, n_out)?)?;

    if let Some(n) = a.samples.or(defaults.samples) {
        if n < 2 {
            return Err(CliError::config("samples needs at least 2 paths"));
        }
        let seed = a.seed.or(cfg.as_ref().map(|c| c.data.seed)).unwrap_or(0);
        let sampler = SamplerConfig {
            dt: defaults.sample_dt,
            memory_cap: a.memory_cap.unwrap_or(defaults.memory_cap),
        };
        let u = sample_uncertain_rollout(&field, &x0, span, n, seed, &sampler)?;
        let std = Trajectory::new(u.mean.times().to_vec(), u.std.clone())?.resample(span.0, span.1, n_out)?;
        write_series(
            &sibling_path(&out, "std"),
            &std_columns(std.dim()),
            std.times(),
            std.states(),
        )?;
        for (i, s) in u.samples.iter().enumerate() {
            write_trajectory(
                &sibling_path(&out, &format!("sample_{i:03}")),
                &s.resample(span.0, span.1, n_out)?,
            )?;
        }
    }
    Ok(String::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegralSummary {
    pub max_abs_delta_h: Option<f64>,
    pub max_rel_delta_j: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvaluateReport {
    pub train_error: f64,
    pub test_error: f64,
    pub total_error: f64,
    pub split_time: f64,
    pub n_eval: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub integrals: Option<IntegralSummary>,
}

/// `H` and `J` along a 4-D trajectory `(q, q̇)`.
pub fn integral_series(traj: &Trajectory, nu: f64) -> CliResult<(Vec<f64>, Vec<f64>)> {
    if traj.dim() != 4 {
        return Err(CliError::config("first integrals need 4-component (q, q') states"));
    }
    let mut h = Vec::with_capacity(traj.len());
    let mut j = Vec::with_capacity(traj.len());
    for s in traj.states() {
        h.push(hamiltonian(&s[..2], &s[2..], nu)?);
        j.push(angular_momentum(&s[..2], &s[2..]));
    }
    Ok((h, j))
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<String> {
    let cfg = a.config.as_deref().map(RunConfig::load).transpose()?;
    let split = match (a.split, &cfg) {
        (Some(s), _) => s,
        (None, Some(c)) => c.data_span()?.1,
        (None, None) => return Err(CliError::config("pass --split or --config")),
    };
    if a.n_eval < 2 {
        return Err(CliError::config("--n-eval must be at least 2"));
    }
    if a.integrals_out.is_some() && a.integrals.is_empty() {
        return Err(CliError::config("--integrals-out needs --integrals"));
    }
    let roll = read_trajectory(&a.rollout)?;
    let reference = read_trajectory(&a.reference)?;
    if roll.dim() != reference.dim() {
        return Err(CliError::format(&a.reference, "state dimension differs from the rollout"));
    }
    let e = evaluate_errors(&roll, &reference, split, a.n_eval)?;
    let mut integrals = None;
    if !a.integrals.is_empty() {
        let (h, j) = integral_series(&roll, a.nu)?;
        let dh = h.iter().map(|v| (v - h[0]).abs()).fold(0.0, f64::max);
        let dj = j.iter().map(|v| (v - j[0]).abs()).fold(0.0, f64::max) / j[0].abs();
        integrals = Some(IntegralSummary {
            max_abs_delta_h: a.integrals.contains(&Integral::Hamiltonian).then_some(dh),
            max_rel_delta_j: a.integrals.contains(&Integral::AngularMomentum).then_some(dj),
        });
        if let Some(path) = &a.integrals_out {
            let rows: Vec<Vec<f64>> = h.iter().zip(&j).map(|(h, j)| vec![*h, *j]).collect();
            write_series(path, &["H".to_owned(), "J".to_owned()], roll.times(), &rows)?;
        }
    }
    let report = EvaluateReport {
        train_error: e.train_error,
        test_error: e.test_error,
        total_error: e.total_error,
        split_time: e.split_time,
        n_eval: e.n_eval,
        integrals,
    };
    let line = to_json_line(&report);
    let out = a.out.clone().or_else(|| cfg.as_ref().and_then(|c| c.outputs.report.clone()));
    if let Some(path) = out {
        let bytes = format!("{line}\n");
        write_atomic(&path, |f| std::io::Write::write_all(f, bytes.as_bytes()))?;
    }
    Ok(line)
}
