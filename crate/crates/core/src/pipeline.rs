//! End-to-end vector-field learning: derivative extraction, structural
//! augmentation, training, prediction, rollout and evaluation.
//!
//! A [`LearnedField`] is either a plain first-order model, a first-order
//! model on a quotient section (group-integration kernel), or a
//! second-order model that predicts accelerations from positions. All three
//! implement [`VectorField`] on the full state, so they can be integrated
//! directly.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dense_gp::{time_nll_shared, TimeGp};
use crate::dynamics::{equidistant, integrate, IntegratorConfig, Trajectory, VectorField};
use crate::error::{check_dim, invalid, Error, Result};
use crate::kernels::{GroupAction, MatrixKernel, SeHyperparams, DEFAULT_QUADRATURE_NODES};
use crate::numerics::factorize_psd;
use crate::optimize::{fit_hyperparams, OptimizerConfig, ParamTransform};
use crate::sparse_gp::{
    fitc_nll_with, fitc_train_weights_with, FitcOptions, InducingSet, KroneckerMode, PredictiveFeatures,
    SparseFieldModel,
};

/// States closer than this to the rotation centre have no well-defined
/// section angle.
pub const DEGENERATE_ORBIT_RADIUS: f64 = 1e-9;

/// Fixed points closer than this (max-norm) to an existing input are
/// duplicates.
pub const FIXED_POINT_TOLERANCE: f64 = 1e-9;

/// Default number of sample paths retained by the uncertainty sampler.
pub const DEFAULT_MEMORY_CAP: usize = 100;

/// Default evaluation grid size for [`evaluate_errors`].
pub const DEFAULT_EVAL_POINTS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Trajectory,
    FixedPoint,
    Augmented,
}

/// State/derivative pairs used to train a field.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeDataset {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    provenance: Vec<Provenance>,
}

impl DerivativeDataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, provenance: Vec<Provenance>) -> Result<Self> {
        check_dim(inputs.len(), targets.len())?;
        check_dim(inputs.len(), provenance.len())?;
        if let (Some(x), Some(y)) = (inputs.first(), targets.first()) {
            for (xi, yi) in inputs.iter().zip(&targets) {
                check_dim(x.len(), xi.len())?;
                check_dim(y.len(), yi.len())?;
                if !xi.iter().chain(yi).all(|v| v.is_finite()) {
                    return Err(invalid("dataset entries must be finite"));
                }
            }
        }
        Ok(Self {
            inputs,
            targets,
            provenance,
        })
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&q| q == p).count()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.inputs.first().map(Vec::len)
    }

    pub fn target_dim(&self) -> Option<usize> {
        self.targets.first().map(Vec::len)
    }
}

/// Settings of the time-GP smoothing step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConfig {
    pub optimizer: OptimizerConfig,
    /// Initial `(λ, l, σ_n)`; derived from the data when absent.
    pub init: Option<[f64; 3]>,
    /// Lower bound on `σ_n` relative to the RMS of the samples.
    pub min_relative_noise: f64,
    /// Fit one hyperparameter set per component instead of a shared one.
    pub per_dimension: bool,
    /// Known observation noise relative to the RMS of the samples; fitted
    /// when absent.
    pub known_relative_noise: Option<f64>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            init: None,
            min_relative_noise: 1e-6,
            per_dimension: false,
            known_relative_noise: None,
        }
    }
}

/// Output of the time-GP step.
#[derive(Debug, Clone)]
pub struct Extraction {
    /// `(m, ṁ)` for order 1; `((m, ṁ), (ṁ, m̈))` for order 2.
    pub first_order: DerivativeDataset,
    /// `(m, m̈)`, order 2 only.
    pub second_order: Option<DerivativeDataset>,
    /// One entry, or one per component when fitted per dimension.
    pub hyperparams: Vec<SeHyperparams>,
    pub noise_std: Vec<f64>,
    pub nll: f64,
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        libm::sqrt(sum / n as f64)
    }
}

fn pooled_std(values: &[Vec<f64>]) -> f64 {
    let n = values.iter().map(Vec::len).sum::<usize>();
    if n == 0 {
        return 0.0;
    }
    let mean = values.iter().flatten().sum::<f64>() / n as f64;
    rms(values.iter().flatten().map(|v| v - mean))
}

/// Smooths every component of `traj` with a zero-mean time GP (shared
/// hyperparameters fitted by Nelder–Mead) and reads off derivatives at the
/// sample times.
pub fn extract_derivative_data(traj: &Trajectory, order: u8, cfg: &ExtractConfig) -> Result<Extraction> {
    if order == 0 || order > 2 {
        return Err(Error::UnsupportedOrder(order));
    }
    if traj.len() < 4 {
        return Err(invalid("derivative extraction needs at least four samples"));
    }
    let times = traj.times();
    let columns: Vec<Vec<f64>> = (0..traj.dim()).map(|d| traj.component(d)).collect();
    let scale = rms(columns.iter().flatten().copied());
    if !(scale > 0.0) {
        return Err(invalid("trajectory is identically zero"));
    }
    let span = traj.end() - traj.start();
    let groups: Vec<&[Vec<f64>]> = if cfg.per_dimension {
        columns.chunks(1).collect()
    } else {
        vec![&columns[..]]
    };
    let mut hypers = Vec::with_capacity(groups.len());
    let mut noises = Vec::with_capacity(groups.len());
    let mut nll = 0.0;
    for cols in groups {
        let scale = rms(cols.iter().flatten().copied()).max(1e-12 * scale);
        let floor = cfg.min_relative_noise * scale;
        let init = cfg.init.unwrap_or([scale, 0.5 * span, 1e-2 * scale]);
        let fit = match cfg.known_relative_noise {
            Some(rel) => {
                let noise = (rel * scale).max(floor);
                let mut fit = fit_hyperparams(
                    |p| time_nll_shared(times, cols, &SeHyperparams::new(p[0], vec![p[1]])?, noise),
                    &init[..2],
                    &ParamTransform::new(2),
                    &cfg.optimizer,
                )?;
                fit.params.push(noise);
                fit
            }
            None => {
                let init = [init[0], init[1], init[2].max(floor)];
                let mut transform = ParamTransform::new(3);
                transform.set_lower(2, floor)?;
                fit_hyperparams(
                    |p| time_nll_shared(times, cols, &SeHyperparams::new(p[0], vec![p[1]])?, p[2]),
                    &init,
                    &transform,
                    &cfg.optimizer,
                )?
            }
        };
        hypers.push(SeHyperparams::new(fit.params[0], vec![fit.params[1]])?);
        noises.push(fit.params[2]);
        nll += fit.value;
    }

    let d = traj.dim();
    let mut m = vec![vec![0.0; d]; traj.len()];
    let mut dm = vec![vec![0.0; d]; traj.len()];
    let mut ddm = vec![vec![0.0; d]; traj.len()];
    for (k, col) in columns.iter().enumerate() {
        let g = if cfg.per_dimension { k } else { 0 };
        let gp = TimeGp::fit(times, col, hypers[g].clone(), noises[g])?;
        let mean = gp.derivative_mean(0, times)?;
        let d1 = gp.derivative_mean(1, times)?;
        for i in 0..traj.len() {
            m[i][k] = mean[i];
            dm[i][k] = d1[i];
        }
        if order == 2 {
            let d2 = gp.derivative_mean(2, times)?;
            for i in 0..traj.len() {
                ddm[i][k] = d2[i];
            }
        }
    }
    let provenance = vec![Provenance::Trajectory; traj.len()];
    let (first_order, second_order) = if order == 1 {
        (DerivativeDataset::new(m, dm, provenance)?, None)
    } else {
        let inputs = m.iter().zip(&dm).map(|(a, b)| [a.as_slice(), b].concat()).collect();
        let targets = dm.iter().zip(&ddm).map(|(a, b)| [a.as_slice(), b].concat()).collect();
        (
            DerivativeDataset::new(inputs, targets, provenance.clone())?,
            Some(DerivativeDataset::new(m, ddm, provenance)?),
        )
    };
    Ok(Extraction {
        first_order,
        second_order,
        hyperparams: hypers,
        noise_std: noises,
        nll,
    })
}

/// Appends `(x̂, 0)` for each fixed point `x̂`.
pub fn augment_fixed_points(data: &DerivativeDataset, points: &[Vec<f64>]) -> Result<DerivativeDataset> {
    let mut out = data.clone();
    let dim_in = data.input_dim();
    let dim_out = data.target_dim().or(dim_in);
    for p in points {
        if let Some(d) = out.input_dim() {
            check_dim(d, p.len())?;
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(invalid("fixed points must be finite"));
        }
        let dup = out.inputs.iter().any(|x| {
            x.iter()
                .zip(p)
                .map(|(a, b)| libm::fabs(a - b))
                .fold(0.0, f64::max)
                <= FIXED_POINT_TOLERANCE
        });
        if dup {
            return Err(Error::DuplicatePoint { index: out.len() });
        }
        out.inputs.push(p.clone());
        out.targets.push(vec![0.0; dim_out.unwrap_or(p.len())]);
        out.provenance.push(Provenance::FixedPoint);
    }
    Ok(out)
}

/// Section angle `ρ` and the projected state `γ_{-ρ} x` with `x_2 = 0` and
/// `x_1 = |(x_1, x_2)|` set exactly.
pub fn project_state(action: &GroupAction, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_dim(action.state_dim(), x.len())?;
    let r = libm::hypot(x[0], x[1]);
    if r <= DEGENERATE_ORBIT_RADIUS {
        return Err(Error::DegenerateOrbit(r));
    }
    let rho = action.section_angle(x);
    let mut y = action.apply(-rho, x)?;
    y[0] = r;
    y[1] = 0.0;
    Ok((rho, y))
}

/// Rotates every pair onto the section `x_2 = 0`, applying the same
/// rotation to its target.
pub fn project_to_quotient(data: &DerivativeDataset, action: &GroupAction) -> Result<DerivativeDataset> {
    let mut inputs = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    for (x, y) in data.inputs.iter().zip(&data.targets) {
        check_dim(action.state_dim(), y.len())?;
        let (rho, xp) = project_state(action, x)?;
        inputs.push(xp);
        targets.push(action.apply(-rho, y)?);
    }
    DerivativeDataset::new(inputs, targets, data.provenance.clone())
}

/// Axis-aligned inducing grid. `lower`/`upper` absent means the data
/// bounding box expanded by `margin` of its extent per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub counts: Vec<usize>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub margin: f64,
}

impl GridSpec {
    pub fn fixed(lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>) -> Self {
        Self {
            counts,
            lower: Some(lower),
            upper: Some(upper),
            margin: 0.0,
        }
    }

    pub fn auto(counts: Vec<usize>) -> Self {
        Self {
            counts,
            lower: None,
            upper: None,
            margin: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InducingSpec {
    Grid(GridSpec),
    /// Full-space points (on the section for quotient models).
    Explicit(Vec<Vec<f64>>),
}

/// Drops coordinate 1 (the section coordinate).
fn quotient_coords(x: &[f64]) -> Vec<f64> {
    let mut q = x.to_vec();
    q.remove(1);
    q
}

/// Builds the grid; with a quotient action the grid axes are the quotient
/// coordinates and the points lie on the section. Automatic bounds come
/// from `inputs` (already projected for quotient models).
pub fn build_inducing_grid(spec: &GridSpec, quotient: Option<&GroupAction>, inputs: &[Vec<f64>]) -> Result<InducingSet> {
    let axes = spec.counts.len();
    let coords: Vec<Vec<f64>> = match quotient {
        Some(_) => inputs.iter().map(|x| quotient_coords(x)).collect(),
        None => inputs.to_vec(),
    };
    let bound = |given: &Option<Vec<f64>>, upper: bool| -> Result<Vec<f64>> {
        if let Some(b) = given {
            check_dim(axes, b.len())?;
            return Ok(b.clone());
        }
        if coords.is_empty() {
            return Err(Error::EmptyDataset);
        }
        (0..axes)
            .map(|a| {
                let col = coords.iter().map(|c| c.get(a).copied().ok_or(Error::DimensionMismatch {
                    expected: axes,
                    found: c.len(),
                }));
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for v in col {
                    let v = v?;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                let extent = hi - lo;
                let pad = if extent > 0.0 {
                    spec.margin * extent
                } else {
                    spec.margin * libm::fabs(hi).max(1.0)
                };
                Ok(if upper { hi + pad } else { lo - pad })
            })
            .collect()
    };
    let lower = bound(&spec.lower, false)?;
    let upper = bound(&spec.upper, true)?;
    match quotient {
        Some(action) => {
            check_dim(action.quotient_dim(), axes)?;
            InducingSet::section_grid(lower, upper, spec.counts.clone())
        }
        None => InducingSet::grid(lower, upper, spec.counts.clone()),
    }
}

/// Matrix kernel family used for the field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    /// `k · I` with ARD lengthscales.
    SharedIsotropic,
    /// One ARD SE kernel per output.
    DiagonalIndependent,
    /// Rotation-equivariant kernel; data are projected to the section.
    Gim { quadrature_nodes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldOrder {
    /// Learn `ẋ = f(x)` on the whole state.
    First,
    /// Learn `q̈ = g(q)`; the state is `(q, q̇)`.
    Second,
}

/// Observation noise of the field GP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// `σ_n` relative to the RMS of the derivative targets.
    pub relative: f64,
    /// Fit `σ_n` together with the kernel hyperparameters.
    pub optimize: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            relative: 1e-3,
            optimize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnConfig {
    pub kernel: KernelFamily,
    pub order: FieldOrder,
    /// Order of time derivatives taken from the trajectory (1 or 2).
    pub derivative_order: u8,
    /// Number of leading trajectory columns that are positions; only these
    /// are smoothed when `derivative_order` is 2.
    pub position_dims: Option<usize>,
    pub inducing: InducingSpec,
    pub noise: NoiseSpec,
    /// Initial kernel hyperparameters in [`MatrixKernel::hyperparams`]
    /// layout; derived from the data when absent.
    pub initial_hyperparams: Option<Vec<f64>>,
    pub optimizer: OptimizerConfig,
    pub extraction: ExtractConfig,
    /// Known fixed points in the model's input space.
    pub fixed_points: Vec<Vec<f64>>,
    /// Lower bound on `λ / σ_n` for equivariant kernels.
    pub min_signal_to_noise: f64,
    pub kronecker: KroneckerMode,
}

impl LearnConfig {
    pub fn new(kernel: KernelFamily, inducing: InducingSpec) -> Self {
        Self {
            kernel,
            order: FieldOrder::First,
            derivative_order: 1,
            position_dims: None,
            inducing,
            noise: NoiseSpec::default(),
            initial_hyperparams: None,
            optimizer: OptimizerConfig::default(),
            extraction: ExtractConfig::default(),
            fixed_points: Vec::new(),
            min_signal_to_noise: 1e3,
            kronecker: KroneckerMode::Auto,
        }
    }

    fn action(&self, dim: usize) -> Result<Option<GroupAction>> {
        match self.kernel {
            KernelFamily::Gim { quadrature_nodes } => {
                if !dim.is_multiple_of(2) {
                    return Err(invalid("equivariant kernels need an even input dimension"));
                }
                Ok(Some(GroupAction::new(dim / 2, quadrature_nodes)?))
            }
            _ => Ok(None),
        }
    }
}

/// How a learned model maps full states to predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStructure {
    pub order: FieldOrder,
    /// Present when the model lives on the quotient section.
    pub quotient: Option<GroupAction>,
}

/// Training record kept with a model.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnMetadata {
    pub n_trajectory_points: usize,
    pub n_fixed_points: usize,
    /// Final field NLL.
    pub nll: f64,
    pub initial_hyperparams: Vec<f64>,
    pub hyperparams: Vec<f64>,
    pub noise_std: f64,
    pub optimizer_evaluations: usize,
    pub optimizer_converged: bool,
    /// Fitted time-GP `(λ, l, σ_n)` per hyperparameter group when trained
    /// from a trajectory.
    pub time_gp: Option<Vec<[f64; 3]>>,
}

/// A trained vector-field model.
#[derive(Debug, Clone)]
pub struct LearnedField {
    model: SparseFieldModel,
    structure: FieldStructure,
    metadata: LearnMetadata,
}

fn initial_kernel(family: KernelFamily, inputs: &[Vec<f64>], targets: &[Vec<f64>], init: Option<&[f64]>) -> Result<MatrixKernel> {
    let din = inputs[0].len();
    let dout = targets[0].len();
    let lambda = pooled_std(targets).max(rms(targets.iter().flatten().copied())).max(f64::MIN_POSITIVE);
    let half_range: Vec<f64> = (0..din)
        .map(|a| {
            let (lo, hi) = inputs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x[a]), hi.max(x[a])));
            0.5 * (hi - lo)
        })
        .collect();
    let positive: Vec<f64> = half_range.iter().copied().filter(|&h| h > 0.0).collect();
    let fallback = if positive.is_empty() {
        1.0
    } else {
        positive.iter().sum::<f64>() / positive.len() as f64
    };
    let ls: Vec<f64> = half_range.iter().map(|&h| if h > 0.0 { h } else { fallback }).collect();
    let base = SeHyperparams::new(lambda, ls.clone())?;
    let kernel = match family {
        KernelFamily::SharedIsotropic => MatrixKernel::shared_isotropic(base, dout)?,
        KernelFamily::DiagonalIndependent => MatrixKernel::diagonal_independent(vec![base; dout])?,
        KernelFamily::Gim { quadrature_nodes } => {
            check_dim(din, dout)?;
            let action = GroupAction::new(din / 2, quadrature_nodes)?;
            let tied: Vec<f64> = (0..din / 2)
                .flat_map(|b| {
                    let l = ls[2 * b].max(ls[2 * b + 1]);
                    [l, l]
                })
                .collect();
            MatrixKernel::gim(SeHyperparams::new(lambda, tied)?, action)?
        }
    };
    match init {
        Some(p) => kernel.with_hyperparams(p),
        None => Ok(kernel),
    }
}

/// Fits the field hyperparameters by minimizing the FITC NLL and computes
/// the prediction weights. `data` must already be in model coordinates
/// (projected for equivariant kernels).
pub fn train_field(data: &DerivativeDataset, inducing: &InducingSet, cfg: &LearnConfig) -> Result<(SparseFieldModel, LearnMetadata)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (x, y) = (data.inputs(), data.targets());
    let kernel = initial_kernel(cfg.kernel, x, y, cfg.initial_hyperparams.as_deref())?;
    let scale = rms(y.iter().flatten().copied());
    let base_noise = cfg.noise.relative * if scale > 0.0 { scale } else { 1.0 };
    if !(base_noise > 0.0) || !base_noise.is_finite() {
        return Err(invalid("noise level must be positive"));
    }
    let opts = FitcOptions {
        kronecker: cfg.kronecker,
        ..FitcOptions::default()
    };
    let nk = kernel.n_hyperparams();
    let equivariant = matches!(cfg.kernel, KernelFamily::Gim { .. });
    let mut init = kernel.hyperparams();
    let mut transform = ParamTransform::new(nk + usize::from(cfg.noise.optimize));
    // With a free noise level the last parameter is λ / σ_n for equivariant
    // kernels (so the ratio bound is a box) and σ_n otherwise.
    if cfg.noise.optimize {
        if equivariant {
            init.push((init[0] / base_noise).max(cfg.min_signal_to_noise));
            transform.set_lower(nk, cfg.min_signal_to_noise)?;
        } else {
            init.push(base_noise);
        }
    } else if equivariant {
        let min_lambda = cfg.min_signal_to_noise * base_noise;
        init[0] = init[0].max(min_lambda);
        transform.set_lower(0, min_lambda)?;
    }
    let noise_of = |p: &[f64]| match (cfg.noise.optimize, equivariant) {
        (false, _) => base_noise,
        (true, true) => p[0] / p[nk],
        (true, false) => p[nk],
    };
    let fit = fit_hyperparams(
        |p| {
            let k = kernel.with_hyperparams(&p[..nk])?;
            fitc_nll_with(x, y, &k, inducing, noise_of(p), &opts)
        },
        &init,
        &transform,
        &cfg.optimizer,
    )?;
    let final_kernel = kernel.with_hyperparams(&fit.params[..nk])?;
    // full invariance check once on the fitted kernel
    let final_kernel = match final_kernel {
        MatrixKernel::Gim(g) => MatrixKernel::gim(g.base().clone(), g.action().clone())?,
        k => k,
    };
    let noise_std = noise_of(&fit.params);
    let model = fitc_train_weights_with(x, y, &final_kernel, inducing, noise_std, &opts)?;
    let metadata = LearnMetadata {
        n_trajectory_points: data.count(Provenance::Trajectory) + data.count(Provenance::Augmented),
        n_fixed_points: data.count(Provenance::FixedPoint),
        nll: model.summary().nll,
        initial_hyperparams: kernel.hyperparams(),
        hyperparams: fit.params[..nk].to_vec(),
        noise_std,
        optimizer_evaluations: fit.evaluations,
        optimizer_converged: fit.converged,
        time_gp: None,
    };
    Ok((model, metadata))
}

/// Runs the whole procedure on a sampled trajectory.
pub fn learn_vector_field(traj: &Trajectory, cfg: &LearnConfig) -> Result<LearnedField> {
    let source = match (cfg.derivative_order, cfg.position_dims) {
        (2, Some(k)) => traj.select_components(0, k)?,
        _ => traj.clone(),
    };
    if cfg.order == FieldOrder::Second && cfg.derivative_order != 2 {
        return Err(invalid("second-order models need second derivatives"));
    }
    let extraction = extract_derivative_data(&source, cfg.derivative_order, &cfg.extraction)?;
    let data = match cfg.order {
        FieldOrder::First => extraction.first_order.clone(),
        FieldOrder::Second => extraction.second_order.clone().expect("order 2 extraction"),
    };
    let mut field = learn_from_dataset(&data, cfg)?;
    field.metadata.time_gp = Some(
        extraction
            .hyperparams
            .iter()
            .zip(&extraction.noise_std)
            .map(|(h, &s)| [h.signal_std(), h.lengthscales()[0], s])
            .collect(),
    );
    Ok(field)
}

/// Augments, projects and trains on an existing derivative dataset (in
/// full-space coordinates).
pub fn learn_from_dataset(data: &DerivativeDataset, cfg: &LearnConfig) -> Result<LearnedField> {
    let dim = data.input_dim().ok_or(Error::EmptyDataset)?;
    let action = cfg.action(dim)?;
    let data = augment_fixed_points(data, &cfg.fixed_points)?;
    let data = match &action {
        Some(a) => project_to_quotient(&data, a)?,
        None => data,
    };
    let inducing = match &cfg.inducing {
        InducingSpec::Grid(spec) => build_inducing_grid(spec, action.as_ref(), data.inputs())?,
        InducingSpec::Explicit(points) => {
            if action.is_some() && points.iter().any(|p| p.get(1) != Some(&0.0)) {
                return Err(invalid("inducing points of equivariant models must lie on the section"));
            }
            InducingSet::explicit(points.clone())?
        }
    };
    let (model, metadata) = train_field(&data, &inducing, cfg)?;
    Ok(LearnedField {
        model,
        structure: FieldStructure {
            order: cfg.order,
            quotient: action,
        },
        metadata,
    })
}

impl LearnedField {
    pub fn from_parts(model: SparseFieldModel, structure: FieldStructure, metadata: LearnMetadata) -> Result<Self> {
        if let Some(a) = &structure.quotient {
            check_dim(a.state_dim(), model.input_dim())?;
        }
        Ok(Self {
            model,
            structure,
            metadata,
        })
    }

    pub fn model(&self) -> &SparseFieldModel {
        &self.model
    }

    pub fn structure(&self) -> &FieldStructure {
        &self.structure
    }

    pub fn metadata(&self) -> &LearnMetadata {
        &self.metadata
    }

    /// Dimension of the full state the field acts on.
    pub fn state_dim(&self) -> usize {
        match self.structure.order {
            FieldOrder::First => self.model.input_dim(),
            FieldOrder::Second => 2 * self.model.input_dim(),
        }
    }

    /// Model input for a full state: the positions of a second-order state.
    fn model_input<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        match self.structure.order {
            FieldOrder::First => x,
            FieldOrder::Second => &x[..self.model.input_dim()],
        }
    }

    fn predict_mean_raw(&self, x: &[f64]) -> Result<DVector<f64>> {
        match &self.structure.quotient {
            None => self.model.predict_mean(x),
            Some(action) => {
                let (rho, xp) = project_state(action, x)?;
                let m = self.model.predict_mean(&xp)?;
                Ok(DVector::from_vec(action.apply(rho, m.as_slice())?))
            }
        }
    }

    /// Predictive mean and covariance of the learned output at a full
    /// state: `ẋ` for first-order models, `q̈` for second-order models.
    pub fn predict(&self, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_dim(self.state_dim(), x.len())?;
        let input = self.model_input(x);
        match &self.structure.quotient {
            None => self.model.predict(input),
            Some(action) => {
                let (rho, xp) = project_state(action, input)?;
                let (m, c) = self.model.predict(&xp)?;
                let g = action.matrix(rho);
                Ok((&g * m, &g * c * g.transpose()))
            }
        }
    }
}

/// Predictive mean and covariance of a learned field at a full state.
pub fn predict_field(field: &LearnedField, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    field.predict(x)
}

impl VectorField for LearnedField {
    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.state_dim(), x.len())?;
        let m = self.predict_mean_raw(self.model_input(x))?;
        match self.structure.order {
            FieldOrder::First => out[..m.len()].copy_from_slice(m.as_slice()),
            FieldOrder::Second => {
                let k = self.model.input_dim();
                out[..k].copy_from_slice(&x[k..2 * k]);
                out[k..2 * k].copy_from_slice(m.as_slice());
            }
        }
        Ok(())
    }

    fn symmetry(&self) -> Option<GroupAction> {
        self.structure.quotient.as_ref().map(|a| match self.structure.order {
            FieldOrder::First => a.clone(),
            FieldOrder::Second => GroupAction::new(2 * a.blocks(), a.quadrature_nodes()).unwrap_or_else(|_| a.clone()),
        })
    }
}

/// Integrates the predictive mean field.
pub fn rollout(field: &LearnedField, x0: &[f64], t_span: (f64, f64), cfg: &IntegratorConfig) -> Result<Trajectory> {
    integrate(field, x0, t_span, cfg)
}

/// Settings of [`sample_uncertain_rollout`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub dt: f64,
    pub memory_cap: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            memory_cap: DEFAULT_MEMORY_CAP,
        }
    }
}

/// Sampled rollouts with per-time statistics.
#[derive(Debug, Clone)]
pub struct UncertainRollout {
    /// Mean over sample paths.
    pub mean: Trajectory,
    /// Per-time sample standard deviation of each component.
    pub std: Vec<Vec<f64>>,
    pub samples: Vec<Trajectory>,
    pub memory_cap: usize,
}

/// Cholesky factor of the covariance of the remembered samples, updated as
/// samples enter at the back and leave at the front.
struct WindowFactor {
    lower: DMatrix<f64>,
}

impl WindowFactor {
    fn new() -> Self {
        Self {
            lower: DMatrix::zeros(0, 0),
        }
    }

    fn dim(&self) -> usize {
        self.lower.nrows()
    }

    fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        x
    }

    /// Extends the factored matrix by `[[A, cross], [crossᵀ, block]]`.
    fn append(&mut self, cross: &DMatrix<f64>, block: &DMatrix<f64>) -> Result<()> {
        let n = self.dim();
        let k = block.nrows();
        let l21t = self.solve_lower(cross);
        let schur = block - l21t.transpose() * &l21t;
        let l22 = factorize_psd(&schur, 0.0)?;
        let mut lower = DMatrix::zeros(n + k, n + k);
        lower.view_mut((0, 0), (n, n)).copy_from(&self.lower);
        lower.view_mut((n, 0), (k, n)).copy_from(&l21t.transpose());
        lower.view_mut((n, n), (k, k)).copy_from(l22.lower());
        self.lower = lower;
        Ok(())
    }

    /// Drops the first `k` rows and columns of the factored matrix.
    fn remove_front(&mut self, k: usize) {
        let n = self.dim();
        let mut l = self.lower.view((k, k), (n - k, n - k)).into_owned();
        for c in 0..k {
            let mut v: Vec<f64> = (k..n).map(|r| self.lower[(r, c)]).collect();
            rank_one_update(&mut l, &mut v);
        }
        self.lower = l;
    }
}

/// `L Lᵀ + v vᵀ` in place.
fn rank_one_update(l: &mut DMatrix<f64>, v: &mut [f64]) {
    let n = l.nrows();
    for k in 0..n {
        let lkk = l[(k, k)];
        let r = libm::hypot(lkk, v[k]);
        let c = r / lkk;
        let s = v[k] / lkk;
        l[(k, k)] = r;
        for i in k + 1..n {
            l[(i, k)] = (l[(i, k)] + s * v[i]) / c;
            v[i] = c * v[i] - s * l[(i, k)];
        }
    }
}

struct Memory {
    points: Vec<(Vec<f64>, PredictiveFeatures)>,
    /// Sample minus model mean, stacked.
    residuals: Vec<f64>,
    factor: WindowFactor,
}

fn draw(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let eig = cov.clone().symmetric_eigen();
    let z = DVector::<f64>::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
    let scaled = DVector::from_fn(mean.len(), |i, _| libm::sqrt(eig.eigenvalues[i].max(0.0)) * z[i]);
    mean + &eig.eigenvectors * scaled
}

fn sample_path(
    field: &LearnedField,
    x0: &[f64],
    t_span: (f64, f64),
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let model = field.model();
    let d = model.output_dim();
    let noise_var = model.noise_std() * model.noise_std();
    let (t0, t1) = t_span;
    let steps = libm::ceil((t1 - t0) / cfg.dt - 1e-9) as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(t0);
    states.push(x0.to_vec());
    let mut mem = Memory {
        points: Vec::new(),
        residuals: Vec::new(),
        factor: WindowFactor::new(),
    };
    let mut x = x0.to_vec();
    for s in 0..steps {
        let t = t0 + s as f64 * cfg.dt;
        let h = (t1 - t).min(cfg.dt);
        let feat = model.features(&x)?;
        let prior_mean = &feat.k_xz * model.weights();
        let mut cov = model.cross_covariance(&x, &feat, &x, &feat)?;
        let mut mean = prior_mean.clone();
        let mut cross = DMatrix::zeros(mem.factor.dim(), d);
        if !mem.points.is_empty() {
            for (j, (p, pf)) in mem.points.iter().enumerate() {
                let c = model.cross_covariance(p, pf, &x, &feat)?;
                cross.view_mut((j * d, 0), (d, d)).copy_from(&c);
            }
            let v = mem.factor.solve_lower(&cross);
            let u = mem.factor.solve_lower(&DMatrix::from_column_slice(mem.residuals.len(), 1, &mem.residuals));
            mean += (v.transpose() * u).column(0);
            cov -= v.transpose() * &v;
        }
        crate::numerics::symmetrize(&mut cov);
        let f = draw(&mean, &cov, rng);
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::IntegrationFailed {
                time: t,
                source: alloc::boxed::Box::new(invalid("non-finite sample")),
            });
        }
        if cfg.memory_cap > 0 {
            let mut block = model.cross_covariance(&x, &feat, &x, &feat)?;
            for i in 0..d {
                block[(i, i)] += noise_var;
            }
            mem.factor.append(&cross, &block).map_err(|e| Error::IntegrationFailed {
                time: t,
                source: alloc::boxed::Box::new(e),
            })?;
            mem.residuals.extend((&f - &prior_mean).iter());
            mem.points.push((x.clone(), feat));
            if mem.points.len() > cfg.memory_cap {
                mem.points.remove(0);
                mem.residuals.drain(..d);
                mem.factor.remove_front(d);
            }
        }
        for (xi, fi) in x.iter_mut().zip(f.iter()) {
            *xi += h * fi;
        }
        times.push(t + h);
        states.push(x.clone());
    }
    Trajectory::new(times, states)
}

/// Euler rollouts driven by draws from the predictive distribution, each
/// conditioned on the path's most recent `memory_cap` draws.
///
/// Supported for plain first-order models.
pub fn sample_uncertain_rollout(
    field: &LearnedField,
    x0: &[f64],
    t_span: (f64, f64),
    n_samples: usize,
    seed: u64,
    cfg: &SamplerConfig,
) -> Result<UncertainRollout> {
    if n_samples < 2 {
        return Err(invalid("need at least two sample paths"));
    }
    if field.structure().quotient.is_some() || field.structure().order != FieldOrder::First {
        return Err(invalid("uncertainty sampling supports plain first-order models only"));
    }
    check_dim(field.state_dim(), x0.len())?;
    if !(cfg.dt > 0.0) || !(t_span.1 > t_span.0) {
        return Err(invalid("need dt > 0 and t1 > t0"));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for p in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        samples.push(sample_path(field, x0, t_span, cfg, &mut rng)?);
    }
    let times = samples[0].times().to_vec();
    let d = x0.len();
    let n = n_samples as f64;
    let mut mean_states = Vec::with_capacity(times.len());
    let mut std = Vec::with_capacity(times.len());
    for i in 0..times.len() {
        let mut m = vec![0.0; d];
        for s in &samples {
            for k in 0..d {
                m[k] += s.states()[i][k] / n;
            }
        }
        let mut v = vec![0.0; d];
        for s in &samples {
            for k in 0..d {
                let e = s.states()[i][k] - m[k];
                v[k] += e * e / (n - 1.0);
            }
        }
        std.push(v.iter().map(|x| libm::sqrt(*x)).collect());
        mean_states.push(m);
    }
    Ok(UncertainRollout {
        mean: Trajectory::new(times, mean_states)?,
        std,
        samples,
        memory_cap: cfg.memory_cap,
    })
}

/// Time-averaged Euclidean errors between a rollout and a reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    pub train_error: f64,
    pub test_error: f64,
    pub total_error: f64,
    pub split_time: f64,
    pub n_eval: usize,
}

/// Resamples both trajectories linearly onto `n_eval` equidistant times
/// over their common span and averages the state distance over
/// `t ≤ split` (train), `t > split` (test) and all times (total). An empty
/// window reports 0.
pub fn evaluate_errors(rollout: &Trajectory, reference: &Trajectory, split_time: f64, n_eval: usize) -> Result<ErrorReport> {
    check_dim(reference.dim(), rollout.dim())?;
    let start = rollout.start().max(reference.start());
    let end = rollout.end().min(reference.end());
    let grid = equidistant(start, end, n_eval)?;
    let (mut train, mut n_train, mut test, mut n_test) = (0.0, 0usize, 0.0, 0usize);
    for &t in &grid {
        let a = rollout.interpolate(t);
        let b = reference.interpolate(t);
        let dist = libm::sqrt(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        if t <= split_time {
            train += dist;
            n_train += 1;
        } else {
            test += dist;
            n_test += 1;
        }
    }
    let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(ErrorReport {
        train_error: avg(train, n_train),
        test_error: avg(test, n_test),
        total_error: avg(train + test, n_train + n_test),
        split_time,
        n_eval,
    })
}

/// Default group-integration kernel family.
pub const GIM_DEFAULT: KernelFamily = KernelFamily::Gim {
    quadrature_nodes: DEFAULT_QUADRATURE_NODES,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{kepler_accel, sample_trajectory_to_data, spiral_rhs, Kepler, SampleGrid, Spiral};
    use crate::kernels::LOW_PRECISION_QUADRATURE_NODES;

    fn spiral_traj() -> Trajectory {
        sample_trajectory_to_data(&Spiral, &[2.0, 0.0], (0.0, 1.5), 20, 0.0, 0, SampleGrid::OpenStart).unwrap()
    }

    fn quick_opt() -> OptimizerConfig {
        OptimizerConfig {
            restarts: 1,
            max_iters: 400,
            ..Default::default()
        }
    }

    #[test]
    fn constant_trajectory_has_zero_derivatives() {
        let times: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let traj = Trajectory::new(times, vec![vec![1.5, -0.5]; 10]).unwrap();
        let e = extract_derivative_data(&traj, 1, &ExtractConfig::default()).unwrap();
        for y in e.first_order.targets() {
            assert!(y.iter().all(|v| v.abs() < 1e-3 * 1.5));
        }
    }

    #[test]
    fn spiral_derivatives_match_rhs() {
        let e = extract_derivative_data(&spiral_traj(), 1, &ExtractConfig::default()).unwrap();
        let d = &e.first_order;
        assert_eq!(d.len(), 20);
        for i in 2..18 {
            let f = spiral_rhs(&[d.inputs()[i][0], d.inputs()[i][1]]);
            let err = (d.targets()[i][0] - f[0]).hypot(d.targets()[i][1] - f[1]);
            assert!(err < 0.15 * f[0].hypot(f[1]), "i={i} err={err}");
        }
    }

    #[test]
    fn kepler_accelerations_match() {
        let k = Kepler::default();
        let x0 = Kepler::DEFAULT_INITIAL_STATE;
        let period = k.period(&x0).unwrap();
        let traj = sample_trajectory_to_data(&k, &x0, (0.0, 2.0 * period), 60, 0.0, 0, SampleGrid::OpenStart).unwrap();
        let pos = traj.select_components(0, 2).unwrap();
        let e = extract_derivative_data(&pos, 2, &ExtractConfig::default()).unwrap();
        let second = e.second_order.unwrap();
        assert_eq!(e.first_order.input_dim(), Some(4));
        for i in 3..57 {
            let a = kepler_accel(&second.inputs()[i], 1.0).unwrap();
            for c in 0..2 {
                assert!((second.targets()[i][c] - a[c]).abs() < 1e-1);
            }
        }
    }

    #[test]
    fn fixed_point_augmentation() {
        let d = DerivativeDataset::new(vec![vec![1.0, 0.0]], vec![vec![0.5, 0.5]], vec![Provenance::Trajectory]).unwrap();
        let a = augment_fixed_points(&d, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a.targets()[1], vec![0.0, 0.0]);
        assert_eq!(a.provenance()[1], Provenance::FixedPoint);
        assert_eq!(augment_fixed_points(&d, &[]).unwrap(), d);
        assert!(matches!(
            augment_fixed_points(&d, &[vec![0.0, 0.0], vec![0.0, 0.0]]),
            Err(Error::DuplicatePoint { .. })
        ));
    }

    #[test]
    fn quotient_projection() {
        let g = GroupAction::paired_planar(30).unwrap();
        let d = DerivativeDataset::new(
            vec![vec![1.5, 0.0, 0.3, -0.2], vec![0.0, 2.0, 0.7, 0.1]],
            vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.7, 0.1, -0.5, 0.25]],
            vec![Provenance::Trajectory; 2],
        )
        .unwrap();
        let p = project_to_quotient(&d, &g).unwrap();
        for (a, b) in p.inputs()[0].iter().zip(&d.inputs()[0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let expect_x = [2.0, 0.0, 0.1, -0.7];
        let expect_y = [0.1, -0.7, 0.25, 0.5];
        for k in 0..4 {
            assert!((p.inputs()[1][k] - expect_x[k]).abs() < 1e-12);
            assert!((p.targets()[1][k] - expect_y[k]).abs() < 1e-12);
        }
        // undo with the forward rotation
        let rho = core::f64::consts::FRAC_PI_2;
        let back_x = g.apply(rho, &p.inputs()[1]).unwrap();
        let back_y = g.apply(rho, &p.targets()[1]).unwrap();
        for k in 0..4 {
            assert!((back_x[k] - d.inputs()[1][k]).abs() < 1e-10);
            assert!((back_y[k] - d.targets()[1][k]).abs() < 1e-10);
        }
        let bad = DerivativeDataset::new(vec![vec![0.0, 0.0, 1.0, 0.0]], vec![vec![0.0; 4]], vec![Provenance::Trajectory]).unwrap();
        assert!(matches!(project_to_quotient(&bad, &g), Err(Error::DegenerateOrbit(_))));
    }

    #[test]
    fn inducing_grids() {
        let spiral = build_inducing_grid(&GridSpec::fixed(vec![-2.0, -2.0], vec![2.0, 2.0], vec![4, 4]), None, &[]).unwrap();
        assert_eq!(spiral.len(), 16);
        let g = GroupAction::paired_planar(30).unwrap();
        let inputs = vec![vec![1.0, 0.0, -0.5, 0.5], vec![2.0, 0.0, 0.5, 1.5]];
        let kepler = build_inducing_grid(&GridSpec::auto(vec![6, 5, 5]), Some(&g), &inputs).unwrap();
        assert_eq!(kepler.len(), 150);
        assert_eq!(kepler.points()[0], vec![0.9, 0.0, -0.6, 0.4]);
        let line = build_inducing_grid(&GridSpec::auto(vec![10]), Some(&GroupAction::planar(30).unwrap()), &[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(line.len(), 10);
        assert!(line.points().iter().all(|p| p[1] == 0.0));
        assert!(matches!(
            build_inducing_grid(&GridSpec::fixed(vec![1.0], vec![0.0], vec![3]), None, &[]),
            Err(Error::InvalidBounds { axis: 0 })
        ));
    }

    #[test]
    fn zero_targets_give_constant_rollout() {
        let d = DerivativeDataset::new(
            vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-0.5, 1.0]],
            vec![vec![0.0, 0.0]; 3],
            vec![Provenance::Trajectory; 3],
        )
        .unwrap();
        let mut cfg = LearnConfig::new(KernelFamily::SharedIsotropic, InducingSpec::Grid(GridSpec::fixed(vec![-1.0, -1.0], vec![1.0, 1.0], vec![3, 3])));
        cfg.initial_hyperparams = Some(vec![1.0, 0.5, 0.5]);
        cfg.optimizer = quick_opt();
        let f = learn_from_dataset(&d, &cfg).unwrap();
        assert_eq!(f.model().weights().amax(), 0.0);
        let r = rollout(&f, &[0.3, 0.3], (0.0, 1.0), &IntegratorConfig::rk4(0.1)).unwrap();
        assert!(r.states().iter().all(|s| s == &[0.3, 0.3]));
    }

    #[test]
    fn spiral_model_smooths_and_pins_fixed_point() {
        let mut cfg = LearnConfig::new(KernelFamily::SharedIsotropic, InducingSpec::Grid(GridSpec::fixed(vec![-2.0, -2.0], vec![2.0, 2.0], vec![4, 4])));
        cfg.fixed_points = vec![vec![0.0, 0.0]];
        cfg.optimizer = quick_opt();
        let traj = spiral_traj();
        let f = learn_vector_field(&traj, &cfg).unwrap();
        assert_eq!(f.metadata().n_fixed_points, 1);
        let (m, _) = f.predict(&[0.0, 0.0]).unwrap();
        let mut free = cfg.clone();
        free.fixed_points.clear();
        let (m_free, _) = learn_vector_field(&traj, &free).unwrap().predict(&[0.0, 0.0]).unwrap();
        assert!(m.norm() < m_free.norm(), "{} vs {}", m.norm(), m_free.norm());

        let e = extract_derivative_data(&traj, 1, &cfg.extraction).unwrap();
        for (x, y) in e.first_order.inputs().iter().zip(e.first_order.targets()).skip(2).take(15) {
            let (m, _) = f.predict(x).unwrap();
            let err = ((m[0] - y[0]).powi(2) + (m[1] - y[1]).powi(2)).sqrt();
            assert!(err < 5e-2 * y[0].hypot(y[1]).max(1.0), "err {err}");
        }

        let far = f.predict(&[30.0, 30.0]).unwrap().1;
        let prior = f.model().kernel().eval(&[30.0, 30.0], &[30.0, 30.0]).unwrap();
        assert!((far - prior).amax() < 1e-10);

        // deterministic retraining
        let g = learn_vector_field(&traj, &cfg).unwrap();
        assert!((f.model().weights() - g.model().weights()).amax() <= 1e-10);
    }

    fn kepler_dataset() -> DerivativeDataset {
        let k = Kepler::default();
        let x0 = Kepler::DEFAULT_INITIAL_STATE;
        let traj = integrate(&k, &x0, (0.0, 2.0 * k.period(&x0).unwrap()), &IntegratorConfig::rk4(1e-3))
            .unwrap()
            .resample(0.0, 2.0 * k.period(&x0).unwrap(), 40)
            .unwrap();
        let targets = traj.states().iter().map(|s| kepler_accel(&s[..2], 1.0).unwrap().to_vec()).collect();
        let inputs = traj.states().iter().map(|s| s[..2].to_vec()).collect();
        DerivativeDataset::new(inputs, targets, vec![Provenance::Trajectory; 40]).unwrap()
    }

    #[test]
    fn second_order_symmetric_model() {
        let mut cfg = LearnConfig::new(
            KernelFamily::Gim {
                quadrature_nodes: LOW_PRECISION_QUADRATURE_NODES,
            },
            InducingSpec::Grid(GridSpec::auto(vec![10])),
        );
        cfg.order = FieldOrder::Second;
        cfg.optimizer = quick_opt();
        let f = learn_from_dataset(&kepler_dataset(), &cfg).unwrap();
        assert!(f.model().summary().used_kronecker);
        assert_eq!(f.state_dim(), 4);
        let hp = &f.metadata().hyperparams;
        assert!(hp[0] / f.metadata().noise_std >= 1e3 * (1.0 - 1e-9));

        let x = [0.8, -0.6, 0.2, 1.0];
        let (m, _) = f.predict(&x).unwrap();
        let truth = kepler_accel(&x[..2], 1.0).unwrap();
        assert!((m[0] - truth[0]).abs() < 0.1 && (m[1] - truth[1]).abs() < 0.1);

        let g = GroupAction::paired_planar(30).unwrap();
        let mut out = [0.0; 4];
        let mut out_g = [0.0; 4];
        for rho in [0.7, 2.5] {
            f.eval(&x, &mut out).unwrap();
            f.eval(&g.apply(rho, &x).unwrap(), &mut out_g).unwrap();
            let rotated = g.apply(rho, &out).unwrap();
            for k in 0..4 {
                assert!((rotated[k] - out_g[k]).abs() < 1e-6);
            }
        }
        assert!(matches!(f.predict(&[0.0, 0.0, 1.0, 0.0]), Err(Error::DegenerateOrbit(_))));
    }

    #[test]
    fn sampler_basics() {
        let d = DerivativeDataset::new(
            vec![vec![0.5, 0.0], vec![0.0, 0.5]],
            vec![vec![0.0, 1.0], vec![-1.0, 0.0]],
            vec![Provenance::Trajectory; 2],
        )
        .unwrap();
        let mut cfg = LearnConfig::new(KernelFamily::SharedIsotropic, InducingSpec::Explicit(vec![vec![0.5, 0.0], vec![0.0, 0.5]]));
        cfg.initial_hyperparams = Some(vec![1.0, 0.5, 0.5]);
        cfg.optimizer = OptimizerConfig {
            max_iters: 1,
            restarts: 0,
            ..Default::default()
        };
        let f = learn_from_dataset(&d, &cfg).unwrap();
        let sc = SamplerConfig { dt: 1e-2, memory_cap: 10 };
        let a = sample_uncertain_rollout(&f, &[0.5, 0.0], (0.0, 0.5), 4, 3, &sc).unwrap();
        let b = sample_uncertain_rollout(&f, &[0.5, 0.0], (0.0, 0.5), 4, 3, &sc).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.mean.len(), 51);
        assert!(a.std.iter().flatten().all(|s| *s >= 0.0));
        assert_ne!(a.samples[0], a.samples[1]);
        let none = sample_uncertain_rollout(&f, &[0.5, 0.0], (0.0, 0.5), 3, 3, &SamplerConfig { dt: 1e-2, memory_cap: 0 }).unwrap();
        assert!(none.samples.iter().all(|s| s.states().iter().flatten().all(|v| v.is_finite())));
        assert!(sample_uncertain_rollout(&f, &[0.5, 0.0], (0.0, 0.5), 1, 3, &sc).is_err());
    }

    #[test]
    fn window_factor_matches_direct() {
        let n = 6;
        let a = DMatrix::from_fn(n, n, |i, j| (-0.3 * (i as f64 - j as f64).powi(2)).exp() + if i == j { 0.1 } else { 0.0 });
        let mut w = WindowFactor::new();
        for k in 0..n {
            let cross = a.view((0, k), (k, 1)).into_owned();
            let block = a.view((k, k), (1, 1)).into_owned();
            w.append(&cross, &block).unwrap();
        }
        assert!((&w.lower * w.lower.transpose() - &a).amax() < 1e-12);
        w.remove_front(2);
        let sub = a.view((2, 2), (4, 4)).into_owned();
        assert!((&w.lower * w.lower.transpose() - sub).amax() < 1e-12);
    }

    #[test]
    fn error_metric() {
        let t = Trajectory::new(vec![0.0, 1.0, 3.0], vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let z = evaluate_errors(&t, &t, 1.5, 300).unwrap();
        assert_eq!((z.train_error, z.test_error, z.total_error), (0.0, 0.0, 0.0));
        let shifted = Trajectory::new(t.times().to_vec(), t.states().iter().map(|s| vec![s[0] + 0.3, s[1]]).collect()).unwrap();
        let r = evaluate_errors(&shifted, &t, 1.5, 300).unwrap();
        for e in [r.train_error, r.test_error, r.total_error] {
            assert!((e - 0.3).abs() < 1e-12);
        }
        assert!(evaluate_errors(&t, &t.select_components(0, 1).unwrap(), 1.5, 300).is_err());
    }
}
