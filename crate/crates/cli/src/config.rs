//! Run configuration: JSON with unknown keys rejected.

use std::path::{Path, PathBuf};

use gpfield_core::dynamics::{IntegratorConfig, IntegratorMethod, Kepler, SampleGrid};
use gpfield_core::kernels::{GroupAction, DEFAULT_QUADRATURE_NODES};
use gpfield_core::optimize::OptimizerConfig;
use gpfield_core::pipeline::{
    ExtractConfig, FieldOrder, GridSpec, InducingSpec, KernelFamily, LearnConfig, NoiseSpec, DEFAULT_EVAL_POINTS,
    DEFAULT_MEMORY_CAP,
};
use gpfield_core::sparse_gp::KroneckerMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub experiment: String,
    pub system: SystemConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub learn: LearnSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub outputs: OutputPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    Spiral,
    Kepler {
        #[serde(default = "default_nu")]
        nu: f64,
    },
    /// Trajectory supplied as a CSV file; `simulate` is unavailable.
    ExternalCsv { path: PathBuf, dim: usize },
}

fn default_nu() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    #[default]
    #[value(name = "open_start")]
    OpenStart,
    Closed,
}

impl From<GridKind> for SampleGrid {
    fn from(g: GridKind) -> Self {
        match g {
            GridKind::OpenStart => SampleGrid::OpenStart,
            GridKind::Closed => SampleGrid::Closed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub span: Option<[f64; 2]>,
    /// Span as a multiple of the orbital period (Kepler only).
    #[serde(default)]
    pub periods: Option<f64>,
    pub n: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grid: GridKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    SharedIsotropic,
    DiagonalIndependent,
    Gim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    /// Planar rotations of `R^2`.
    So2,
    /// Simultaneous rotation of `(q, q̇)` in `R^4`.
    So2Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrderKind {
    #[default]
    First,
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KroneckerKind {
    #[default]
    Auto,
    Off,
    Force,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InducingConfig {
    Grid {
        counts: Vec<usize>,
        #[serde(default)]
        lower: Option<Vec<f64>>,
        #[serde(default)]
        upper: Option<Vec<f64>>,
        #[serde(default = "default_margin")]
        margin: f64,
    },
    Explicit(Vec<Vec<f64>>),
}

fn default_margin() -> f64 {
    0.1
}

impl Default for InducingConfig {
    fn default() -> Self {
        Self::Grid {
            counts: vec![4, 4],
            lower: None,
            upper: None,
            margin: default_margin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_relative_noise")]
    pub relative: f64,
    #[serde(default)]
    pub optimize: bool,
}

fn default_relative_noise() -> f64 {
    NoiseSpec::default().relative
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            relative: default_relative_noise(),
            optimize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "d_max_iters")]
    pub max_iters: usize,
    #[serde(default = "d_x_tol")]
    pub x_tol: f64,
    #[serde(default = "d_f_tol")]
    pub f_tol: f64,
    #[serde(default = "d_initial_step")]
    pub initial_step: f64,
    #[serde(default = "d_restarts")]
    pub restarts: usize,
}

fn d_max_iters() -> usize {
    OptimizerConfig::default().max_iters
}
fn d_x_tol() -> f64 {
    OptimizerConfig::default().x_tol
}
fn d_f_tol() -> f64 {
    OptimizerConfig::default().f_tol
}
fn d_initial_step() -> f64 {
    OptimizerConfig::default().initial_step
}
fn d_restarts() -> usize {
    OptimizerConfig::default().restarts
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            max_iters: d_max_iters(),
            x_tol: d_x_tol(),
            f_tol: d_f_tol(),
            initial_step: d_initial_step(),
            restarts: d_restarts(),
        }
    }
}

impl OptimizerSection {
    pub fn to_core(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            max_iters: self.max_iters,
            x_tol: self.x_tol,
            f_tol: self.f_tol,
            initial_step: self.initial_step,
            restarts: self.restarts,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExtractionSection {
    #[serde(default)]
    pub per_dimension: bool,
    #[serde(default)]
    pub known_relative_noise: Option<f64>,
    #[serde(default)]
    pub min_relative_noise: Option<f64>,
    /// Initial `(λ, l, σ_n)`.
    #[serde(default)]
    pub init: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnSection {
    #[serde(default)]
    pub kernel: KernelKind,
    #[serde(default)]
    pub symmetry: Option<Symmetry>,
    #[serde(default = "d_quadrature")]
    pub quadrature_nodes: usize,
    #[serde(default)]
    pub order: OrderKind,
    #[serde(default)]
    pub inducing: InducingConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub initial_hyperparams: Option<Vec<f64>>,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub extraction: ExtractionSection,
    #[serde(default)]
    pub fixed_points: Vec<Vec<f64>>,
    #[serde(default = "d_min_snr")]
    pub min_signal_to_noise: f64,
    #[serde(default)]
    pub kronecker: KroneckerKind,
}

fn d_quadrature() -> usize {
    DEFAULT_QUADRATURE_NODES
}
fn d_min_snr() -> f64 {
    1e3
}

impl Default for LearnSection {
    fn default() -> Self {
        Self {
            kernel: KernelKind::default(),
            symmetry: None,
            quadrature_nodes: d_quadrature(),
            order: OrderKind::default(),
            inducing: InducingConfig::default(),
            noise: NoiseConfig::default(),
            initial_hyperparams: None,
            optimizer: OptimizerSection::default(),
            extraction: ExtractionSection::default(),
            fixed_points: Vec::new(),
            min_signal_to_noise: d_min_snr(),
            kronecker: KroneckerKind::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorKind {
    #[default]
    Rk4,
    Euler,
    #[value(name = "implicit_midpoint")]
    ImplicitMidpoint,
}

impl From<IntegratorKind> for IntegratorMethod {
    fn from(k: IntegratorKind) -> Self {
        match k {
            IntegratorKind::Rk4 => IntegratorMethod::Rk4,
            IntegratorKind::Euler => IntegratorMethod::Euler,
            IntegratorKind::ImplicitMidpoint => IntegratorMethod::ImplicitMidpoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    #[serde(default)]
    pub integrator: IntegratorKind,
    #[serde(default = "d_dt")]
    pub dt: f64,
    #[serde(default)]
    pub span: Option<[f64; 2]>,
    /// Span as a multiple of the orbital period (Kepler only).
    #[serde(default)]
    pub periods: Option<f64>,
    /// Defaults to `data.x0`.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "d_n_out")]
    pub n_out: usize,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default = "d_sample_dt")]
    pub sample_dt: f64,
    #[serde(default = "d_memory_cap")]
    pub memory_cap: usize,
}

fn d_dt() -> f64 {
    1e-3
}
fn d_n_out() -> usize {
    DEFAULT_EVAL_POINTS
}
fn d_sample_dt() -> f64 {
    1e-3
}
fn d_memory_cap() -> usize {
    DEFAULT_MEMORY_CAP
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            integrator: IntegratorKind::default(),
            dt: d_dt(),
            span: None,
            periods: None,
            x0: None,
            n_out: d_n_out(),
            samples: None,
            sample_dt: d_sample_dt(),
            memory_cap: d_memory_cap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default)]
    pub trajectory: Option<PathBuf>,
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub rollout: Option<PathBuf>,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let dim = self.state_dim();
        if dim == 0 {
            return Err(CliError::config("state dimension must be positive"));
        }
        if let Some(x0) = &self.data.x0 {
            if x0.len() != dim {
                return Err(CliError::config(format!("data.x0 needs {dim} entries")));
            }
        }
        if let Some(x0) = &self.rollout.x0 {
            if x0.len() != dim {
                return Err(CliError::config(format!("rollout.x0 needs {dim} entries")));
            }
        }
        if self.data.n < 2 {
            return Err(CliError::config("data.n must be at least 2"));
        }
        if !(self.data.noise_std >= 0.0) {
            return Err(CliError::config("data.noise_std must be non-negative"));
        }
        if self.data.span.is_some() && self.data.periods.is_some() {
            return Err(CliError::config("give either data.span or data.periods"));
        }
        if self.rollout.span.is_some() && self.rollout.periods.is_some() {
            return Err(CliError::config("give either rollout.span or rollout.periods"));
        }
        let periodic = matches!(self.system, SystemConfig::Kepler { .. });
        if !periodic && (self.data.periods.is_some() || self.rollout.periods.is_some()) {
            return Err(CliError::config("spans in periods need the kepler system"));
        }
        if !(self.rollout.dt > 0.0) || !(self.rollout.sample_dt > 0.0) {
            return Err(CliError::config("rollout step sizes must be positive"));
        }
        if self.rollout.n_out < 2 {
            return Err(CliError::config("rollout.n_out must be at least 2"));
        }
        if let Some(s) = self.rollout.samples {
            if s < 2 {
                return Err(CliError::config("rollout.samples must be at least 2"));
            }
        }
        let learn = &self.learn;
        match (learn.kernel, learn.symmetry) {
            (KernelKind::Gim, None) => return Err(CliError::config("the gim kernel needs learn.symmetry")),
            (KernelKind::Gim, Some(s)) => {
                let model_dim = self.model_input_dim();
                let expected = match s {
                    Symmetry::So2 => 2,
                    Symmetry::So2Block => 4,
                };
                if model_dim != expected {
                    return Err(CliError::config(format!(
                        "symmetry {s:?} acts on dimension {expected}, the model input has dimension {model_dim}"
                    )));
                }
            }
            (_, Some(_)) => return Err(CliError::config("learn.symmetry requires kernel = gim")),
            _ => {}
        }
        if learn.order == OrderKind::Second && !dim.is_multiple_of(2) {
            return Err(CliError::config("second-order models need a state (q, q̇) of even dimension"));
        }
        if !(learn.noise.relative > 0.0) {
            return Err(CliError::config("learn.noise.relative must be positive"));
        }
        let model_dim = self.model_input_dim();
        for p in &learn.fixed_points {
            if p.len() != model_dim {
                return Err(CliError::config(format!("fixed points need {model_dim} entries")));
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        match &self.system {
            SystemConfig::Spiral => 2,
            SystemConfig::Kepler { .. } => 4,
            SystemConfig::ExternalCsv { dim, .. } => *dim,
        }
    }

    /// Dimension of the learned model's input.
    pub fn model_input_dim(&self) -> usize {
        match self.learn.order {
            OrderKind::First => self.state_dim(),
            OrderKind::Second => self.state_dim() / 2,
        }
    }

    pub fn data_x0(&self) -> CliResult<Vec<f64>> {
        if let Some(x0) = &self.data.x0 {
            return Ok(x0.clone());
        }
        match &self.system {
            SystemConfig::Spiral => Ok(vec![2.0, 0.0]),
            SystemConfig::Kepler { .. } => Ok(Kepler::DEFAULT_INITIAL_STATE.to_vec()),
            SystemConfig::ExternalCsv { .. } => Err(CliError::config("data.x0 is required")),
        }
    }

    pub fn rollout_x0(&self) -> CliResult<Vec<f64>> {
        match &self.rollout.x0 {
            Some(x0) => Ok(x0.clone()),
            None => self.data_x0(),
        }
    }

    fn period(&self) -> CliResult<Option<f64>> {
        match &self.system {
            SystemConfig::Kepler { nu } => {
                let k = Kepler { nu: *nu };
                Ok(Some(k.period(&self.data_x0()?)?))
            }
            _ => Ok(None),
        }
    }

    fn resolve_span(&self, span: Option<[f64; 2]>, periods: Option<f64>, default: [f64; 2]) -> CliResult<(f64, f64)> {
        let s = match (span, periods) {
            (Some(s), _) => s,
            (None, Some(p)) => {
                let period = self.period()?.ok_or_else(|| CliError::config("no orbital period"))?;
                [0.0, p * period]
            }
            (None, None) => default,
        };
        if !(s[1] > s[0]) {
            return Err(CliError::config("spans need start < end"));
        }
        Ok((s[0], s[1]))
    }

    pub fn data_span(&self) -> CliResult<(f64, f64)> {
        let default = match &self.system {
            SystemConfig::Spiral => [0.0, 1.5],
            SystemConfig::Kepler { .. } => {
                return self.resolve_span(self.data.span, Some(self.data.periods.unwrap_or(2.0)), [0.0, 1.0])
            }
            SystemConfig::ExternalCsv { .. } => [0.0, 1.0],
        };
        self.resolve_span(self.data.span, self.data.periods, default)
    }

    pub fn rollout_span(&self) -> CliResult<(f64, f64)> {
        let default = match &self.system {
            SystemConfig::Spiral => [0.0, 3.0],
            SystemConfig::Kepler { .. } => {
                return self.resolve_span(self.rollout.span, Some(self.rollout.periods.unwrap_or(5.0)), [0.0, 1.0])
            }
            SystemConfig::ExternalCsv { .. } => {
                let (a, b) = self.data_span()?;
                [a, b]
            }
        };
        self.resolve_span(self.rollout.span, self.rollout.periods, default)
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig::new(self.rollout.integrator.into(), self.rollout.dt)
    }

    pub fn group_action(&self) -> CliResult<Option<GroupAction>> {
        Ok(match self.learn.symmetry {
            None => None,
            Some(Symmetry::So2) => Some(GroupAction::planar(self.learn.quadrature_nodes)?),
            Some(Symmetry::So2Block) => Some(GroupAction::paired_planar(self.learn.quadrature_nodes)?),
        })
    }

    /// Core learning configuration; `seed` drives optimizer restarts.
    pub fn learn_config(&self, seed: u64) -> CliResult<LearnConfig> {
        let l = &self.learn;
        let kernel = match l.kernel {
            KernelKind::SharedIsotropic => KernelFamily::SharedIsotropic,
            KernelKind::DiagonalIndependent => KernelFamily::DiagonalIndependent,
            KernelKind::Gim => KernelFamily::Gim {
                quadrature_nodes: l.quadrature_nodes,
            },
        };
        let inducing = match &l.inducing {
            InducingConfig::Grid {
                counts,
                lower,
                upper,
                margin,
            } => InducingSpec::Grid(GridSpec {
                counts: counts.clone(),
                lower: lower.clone(),
                upper: upper.clone(),
                margin: *margin,
            }),
            InducingConfig::Explicit(points) => InducingSpec::Explicit(points.clone()),
        };
        let mut cfg = LearnConfig::new(kernel, inducing);
        cfg.order = match l.order {
            OrderKind::First => FieldOrder::First,
            OrderKind::Second => FieldOrder::Second,
        };
        if l.order == OrderKind::Second {
            cfg.derivative_order = 2;
            cfg.position_dims = Some(self.state_dim() / 2);
        }
        cfg.noise = NoiseSpec {
            relative: l.noise.relative,
            optimize: l.noise.optimize,
        };
        cfg.initial_hyperparams = l.initial_hyperparams.clone();
        cfg.optimizer = l.optimizer.to_core(seed);
        let mut extraction = ExtractConfig {
            optimizer: l.optimizer.to_core(seed),
            init: l.extraction.init,
            per_dimension: l.extraction.per_dimension,
            known_relative_noise: l.extraction.known_relative_noise,
            ..ExtractConfig::default()
        };
        if let Some(m) = l.extraction.min_relative_noise {
            extraction.min_relative_noise = m;
        }
        cfg.extraction = extraction;
        cfg.fixed_points = l.fixed_points.clone();
        cfg.min_signal_to_noise = l.min_signal_to_noise;
        cfg.kronecker = match l.kronecker {
            KroneckerKind::Auto => KroneckerMode::Auto,
            KroneckerKind::Off => KroneckerMode::Off,
            KroneckerKind::Force => KroneckerMode::Force,
        };
        Ok(cfg)
    }

    /// SHA-256 over the canonical serialization of everything except the
    /// experiment name and output paths.
    pub fn hash(&self) -> String {
        let mut semantic = self.clone();
        semantic.experiment.clear();
        semantic.outputs = OutputPaths::default();
        let bytes = serde_json::to_vec(&semantic).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
