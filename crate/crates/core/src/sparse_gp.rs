//! FITC sparse GP regression of vector fields with matrix-valued kernels.
//!
//! Targets are flattened point-major: entry `i * D + d` is component `d` of
//! point `i`. The `(ND) x (ND)` training covariance is never formed; all
//! quantities go through `V = L_zz⁻¹ K_ZX` and the `DM x DM` matrix
//! `B = I + V Λ⁻¹ Vᵀ`, so that `Σ⁻¹ = K_ZZ + K_ZX Λ⁻¹ K_XZ = L_zz B L_zzᵀ`.
//!
//! When every kernel block on the data and inducing points is a multiple of
//! the identity, the same computation runs on the scalar kernel with a
//! `N x D` target matrix and the factors are expanded with `⊗ I_D`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, invalid, Error, Result};
use crate::kernels::{gram, gram_symmetric, scalar_gram, scalar_gram_symmetric, MatrixKernel};
use crate::numerics::{clamp_psd, factorize_psd, kron, PsdFactorization};

/// Default relative jitter added to `K_ZZ`, scaled by its mean diagonal.
pub const DEFAULT_KZZ_RELATIVE_JITTER: f64 = 1e-10;

/// Inducing points closer than this (max-norm) count as duplicates.
pub const DUPLICATE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum InducingLayout {
    /// Cartesian grid; `lower`/`upper`/`counts` per axis. With `section`
    /// set the grid axes are quotient coordinates and every point carries
    /// an extra zero at index 1 (the section `x_2 = 0`).
    Grid {
        lower: Vec<f64>,
        upper: Vec<f64>,
        counts: Vec<usize>,
        section: bool,
    },
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InducingSet {
    points: Vec<Vec<f64>>,
    layout: InducingLayout,
}

impl InducingSet {
    pub fn explicit(points: Vec<Vec<f64>>) -> Result<Self> {
        Self::validated(points, InducingLayout::Explicit)
    }

    /// Equidistant Cartesian grid, last axis varying fastest. An axis with
    /// count 1 sits at the midpoint of its bounds.
    pub fn grid(lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        Self::build_grid(lower, upper, counts, false)
    }

    /// Grid over quotient coordinates embedded on the section `x_2 = 0`:
    /// a point `(a, b, c, …)` of the grid becomes `(a, 0, b, c, …)`.
    pub fn section_grid(lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        Self::build_grid(lower, upper, counts, true)
    }

    fn build_grid(lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>, section: bool) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        check_dim(lower.len(), counts.len())?;
        if lower.is_empty() {
            return Err(invalid("grid needs at least one axis"));
        }
        for axis in 0..lower.len() {
            let (lo, hi) = (lower[axis], upper[axis]);
            if !lo.is_finite() || !hi.is_finite() || lo > hi || counts[axis] == 0 {
                return Err(Error::InvalidBounds { axis });
            }
            if counts[axis] > 1 && lo == hi {
                return Err(Error::InvalidBounds { axis });
            }
        }
        let axes: Vec<Vec<f64>> = (0..lower.len())
            .map(|a| {
                let c = counts[a];
                if c == 1 {
                    vec![0.5 * (lower[a] + upper[a])]
                } else {
                    let h = (upper[a] - lower[a]) / (c - 1) as f64;
                    (0..c)
                        .map(|k| if k == c - 1 { upper[a] } else { lower[a] + k as f64 * h })
                        .collect()
                }
            })
            .collect();
        let total: usize = counts.iter().product();
        let mut points = Vec::with_capacity(total);
        let mut idx = vec![0usize; axes.len()];
        for _ in 0..total {
            let mut p: Vec<f64> = idx.iter().enumerate().map(|(a, &k)| axes[a][k]).collect();
            if section {
                p.insert(1, 0.0);
            }
            points.push(p);
            for a in (0..axes.len()).rev() {
                idx[a] += 1;
                if idx[a] < axes[a].len() {
                    break;
                }
                idx[a] = 0;
            }
        }
        Self::validated(
            points,
            InducingLayout::Grid {
                lower,
                upper,
                counts,
                section,
            },
        )
    }

    fn validated(points: Vec<Vec<f64>>, layout: InducingLayout) -> Result<Self> {
        let first = points.first().ok_or(Error::EmptyDataset)?;
        let d = first.len();
        if d == 0 {
            return Err(invalid("inducing points must have at least one coordinate"));
        }
        for p in &points {
            check_dim(d, p.len())?;
            if !p.iter().all(|v| v.is_finite()) {
                return Err(invalid("inducing points must be finite"));
            }
        }
        for i in 0..points.len() {
            for j in 0..i {
                let dist = points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| libm::fabs(a - b))
                    .fold(0.0, f64::max);
                if dist <= DUPLICATE_TOLERANCE {
                    return Err(Error::DuplicatePoint { index: i });
                }
            }
        }
        Ok(Self { points, layout })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn layout(&self) -> &InducingLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

/// Use of the scalar-kernel shortcut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KroneckerMode {
    /// Use it whenever the kernel blocks are provably `c · I`.
    #[default]
    Auto,
    Off,
    /// Require it; fails if the blocks are not `c · I`.
    Force,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitcOptions {
    pub kronecker: KroneckerMode,
    /// Jitter on `K_ZZ` relative to its mean diagonal.
    pub kzz_relative_jitter: f64,
}

impl Default for FitcOptions {
    fn default() -> Self {
        Self {
            kronecker: KroneckerMode::Auto,
            kzz_relative_jitter: DEFAULT_KZZ_RELATIVE_JITTER,
        }
    }
}

/// Whether every block of `kernel` between the given points is a multiple
/// of the identity.
///
/// True for the shared isotropic kernel, and for the planar group-integration
/// kernel when all points lie on the section `x_2 = 0`: the quadrature nodes
/// are symmetric under `θ → -θ`, so the rotation's sine parts cancel.
pub fn blocks_are_scalar(kernel: &MatrixKernel, sets: &[&[Vec<f64>]]) -> bool {
    match kernel {
        MatrixKernel::SharedIsotropic { .. } => true,
        MatrixKernel::Gim(g) => {
            g.action().blocks() == 1
                && g.action().quadrature_nodes() % 2 == 0
                && sets.iter().all(|s| s.iter().all(|p| p[1] == 0.0))
        }
        MatrixKernel::DiagonalIndependent(ks) => ks.len() == 1,
        MatrixKernel::Usm(_) => false,
    }
}

fn check_problem(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    kernel: &MatrixKernel,
    inducing: &InducingSet,
    noise_std: f64,
) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_dim(inputs.len(), targets.len())?;
    let (din, dout) = (kernel.input_dim(), kernel.output_dim());
    check_dim(din, inducing.dim())?;
    for (x, y) in inputs.iter().zip(targets) {
        check_dim(din, x.len())?;
        check_dim(dout, y.len())?;
        if !x.iter().chain(y).all(|v| v.is_finite()) {
            return Err(invalid("training data must be finite"));
        }
    }
    if !(noise_std > 0.0) || !noise_std.is_finite() {
        return Err(invalid("noise std must be positive"));
    }
    Ok(())
}

/// Mean diagonal of `a ⊗ I_repeat`, summed in the expanded order so both
/// assembly paths pick bitwise-equal jitter.
fn mean_diagonal(a: &DMatrix<f64>, repeat: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.nrows() {
        for _ in 0..repeat {
            sum += a[(i, i)];
        }
    }
    sum / (a.nrows() * repeat) as f64
}

/// Everything FITC needs on one kernel scale (scalar or full).
struct Core {
    kzz: PsdFactorization,
    /// `L_zz⁻¹ K_ZX`.
    v: DMatrix<f64>,
    /// Scalar diagonal of `diag(K_XX - Q_XX) + σ_n²`.
    lambda: DVector<f64>,
    b: PsdFactorization,
}

fn core_from_parts(
    kzz: DMatrix<f64>,
    kzx: DMatrix<f64>,
    kxx_diag: DVector<f64>,
    noise_var: f64,
    jitter: f64,
    repeat: usize,
) -> Result<Core> {
    let kzz = factorize_psd(&kzz, jitter * mean_diagonal(&kzz, repeat))?;
    let v = kzz.solve_lower(&kzx)?;
    let n = v.ncols();
    let lambda = DVector::from_fn(n, |i, _| {
        let deficit = kxx_diag[i] - v.column(i).norm_squared();
        deficit.max(0.0) + noise_var
    });
    let mut w = v.clone();
    for (i, mut col) in w.column_iter_mut().enumerate() {
        col /= libm::sqrt(lambda[i]);
    }
    let mut b = &w * w.transpose();
    for i in 0..b.nrows() {
        b[(i, i)] += 1.0;
    }
    let b = factorize_psd(&b, 0.0)?;
    Ok(Core { kzz, v, lambda, b })
}

impl Core {
    fn log_det(&self) -> f64 {
        self.b.log_det() + self.lambda.iter().map(|l| libm::log(*l)).sum::<f64>()
    }

    /// Returns the data-fit term and `L_B⁻¹ V Λ⁻¹ y` for each target column.
    fn quadratic(&self, y: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let mut scaled = y.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row /= self.lambda[i];
        }
        let fit: f64 = y.iter().zip(scaled.iter()).map(|(a, b)| a * b).sum();
        let gamma = self.b.solve_lower(&(&self.v * scaled))?;
        Ok((fit - gamma.norm_squared(), gamma))
    }

    /// `L_zz⁻ᵀ L_B⁻ᵀ γ = Σ K_ZX Λ⁻¹ y`.
    fn weights(&self, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.kzz.solve_upper(&self.b.solve_upper(gamma)?)
    }

    fn sigma_inverse_factor(&self) -> Result<PsdFactorization> {
        PsdFactorization::from_lower(self.kzz.lower() * self.b.lower(), 0.0)
    }
}

fn use_kronecker(kernel: &MatrixKernel, inputs: &[Vec<f64>], inducing: &InducingSet, mode: KroneckerMode) -> Result<bool> {
    let scalar = blocks_are_scalar(kernel, &[inputs, inducing.points()]);
    match mode {
        KroneckerMode::Off => Ok(false),
        KroneckerMode::Auto => Ok(scalar),
        KroneckerMode::Force if scalar => Ok(true),
        KroneckerMode::Force => Err(invalid("kernel blocks are not multiples of the identity")),
    }
}

fn dense_core(inputs: &[Vec<f64>], kernel: &MatrixKernel, inducing: &InducingSet, noise_std: f64, opts: &FitcOptions) -> Result<Core> {
    let d = kernel.output_dim();
    let kzz = gram_symmetric(kernel, inducing.points())?;
    let kzx = gram(kernel, inducing.points(), inputs)?;
    let mut diag = DVector::zeros(inputs.len() * d);
    let mut buf = vec![0.0; d];
    for (i, x) in inputs.iter().enumerate() {
        kernel.self_diagonal(x, &mut buf);
        for (k, v) in buf.iter().enumerate() {
            diag[i * d + k] = *v;
        }
    }
    core_from_parts(kzz, kzx, diag, noise_std * noise_std, opts.kzz_relative_jitter, 1)
}

fn scalar_core(inputs: &[Vec<f64>], kernel: &MatrixKernel, inducing: &InducingSet, noise_std: f64, opts: &FitcOptions) -> Result<Core> {
    let z = inducing.points();
    let kzz = scalar_gram_symmetric(kernel, z)?;
    let kzx = scalar_gram(kernel, z, inputs)?;
    let d = kernel.output_dim();
    let mut buf = vec![0.0; d];
    let diag = DVector::from_iterator(
        inputs.len(),
        inputs.iter().map(|x| {
            kernel.self_diagonal(x, &mut buf);
            buf[0]
        }),
    );
    core_from_parts(kzz, kzx, diag, noise_std * noise_std, opts.kzz_relative_jitter, d)
}

/// Point-major vector of all targets.
fn flatten(targets: &[Vec<f64>]) -> DMatrix<f64> {
    let d = targets[0].len();
    DMatrix::from_iterator(targets.len() * d, 1, targets.iter().flatten().copied())
}

/// `N x D` target matrix.
fn target_matrix(targets: &[Vec<f64>]) -> DMatrix<f64> {
    let d = targets[0].len();
    DMatrix::from_fn(targets.len(), d, |i, k| targets[i][k])
}

fn expand_factor(f: &PsdFactorization, d: usize) -> Result<PsdFactorization> {
    PsdFactorization::from_lower(kron(f.lower(), &DMatrix::identity(d, d)), f.jitter_used())
}

/// Assembled FITC quantities.
#[derive(Debug, Clone)]
pub struct FitcAssembly {
    /// Scalar diagonal `Λ` of length `N D`.
    pub lambda: DVector<f64>,
    /// Factor of `Σ⁻¹ = K_ZZ + K_ZX Λ⁻¹ K_XZ`.
    pub sigma_factor: PsdFactorization,
    pub kzz_factor: PsdFactorization,
}

pub fn fitc_assemble(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    kernel: &MatrixKernel,
    inducing: &InducingSet,
    noise_std: f64,
) -> Result<FitcAssembly> {
    fitc_assemble_with(inputs, targets, kernel, inducing, noise_std, &FitcOptions::default())
}

pub fn fitc_assemble_with(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    kernel: &MatrixKernel,
    inducing: &InducingSet,
    noise_std: f64,
    opts: &FitcOptions,
) -> Result<FitcAssembly> {
    check_problem(inputs, targets, kernel, inducing, noise_std)?;
    let d = kernel.output_dim();
    if use_kronecker(kernel, inputs, inducing, opts.kronecker)? {
        let core = scalar_core(inputs, kernel, inducing, noise_std, opts)?;
        let lambda = DVector::from_iterator(inputs.len() * d, core.lambda.iter().flat_map(|&l| core::iter::repeat_n(l, d)));
        Ok(FitcAssembly {
            lambda,
            sigma_factor: expand_factor(&core.sigma_inverse_factor()?, d)?,
            kzz_factor: expand_factor(&core.kzz, d)?,
        })
    } else {
        let core = dense_core(inputs, kernel, inducing, noise_std, opts)?;
        Ok(FitcAssembly {
            sigma_factor: core.sigma_inverse_factor()?,
            lambda: core.lambda,
            kzz_factor: core.kzz,
        })
    }
}

/// `ẋᵀ(Q_XX + Λ)⁻¹ẋ + log det(Q_XX + Λ)`.
pub fn fitc_nll(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    kernel: &MatrixKernel,
    inducing: &InducingSet,
    noise_std: f64,
) -> Result<f64> {
    fitc_nll_with(inputs, targets, kernel, inducing, noise_std, &FitcOptions::default())
}

pub fn fitc_nll_with(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    kernel: &MatrixKernel,
    inducing: &InducingSet,
    noise_std: f64,
    opts: &FitcOptions,
) -> Result<f64> {
    check_problem(inputs, targets, kernel, inducing, noise_std)?;
    if use_kronecker(kernel, inputs, inducing, opts.kronecker)? {
        let core = scalar_core(inputs, kernel, inducing, noise_std, opts)?;
        let (quad, _) = core.quadratic(&target_matrix(targets))?;
        Ok(quad + kernel.output_dim() as f64 * core.log_det())
    } else {
        let core = dense_core(inputs, kernel, inducing, noise_std, opts)?;
        let (quad, _) = core.quadratic(&flatten(targets))?;
        Ok(quad + core.log_det())
    }
}

/// Summary of the data a model was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSummary {
    pub n_points: usize,
    pub nll: f64,
    pub used_kronecker: bool,
}

/// Trained FITC model ready for prediction.
#[derive(Debug, Clone)]
pub struct SparseFieldModel {
    kernel: MatrixKernel,
    inducing: InducingSet,
    noise_std: f64,
    weights: DVector<f64>,
    sigma_factor: PsdFactorization,
    kzz_factor: PsdFactorization,
    summary: TrainingSummary,
}

pub fn fitc_train_weights(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    kernel: &MatrixKernel,
    inducing: &InducingSet,
    noise_std: f64,
) -> Result<SparseFieldModel> {
    fitc_train_weights_with(inputs, targets, kernel, inducing, noise_std, &FitcOptions::default())
}

pub fn fitc_train_weights_with(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    kernel: &MatrixKernel,
    inducing: &InducingSet,
    noise_std: f64,
    opts: &FitcOptions,
) -> Result<SparseFieldModel> {
    check_problem(inputs, targets, kernel, inducing, noise_std)?;
    let d = kernel.output_dim();
    let kronecker = use_kronecker(kernel, inputs, inducing, opts.kronecker)?;
    let (weights, sigma_factor, kzz_factor, nll) = if kronecker {
        let core = scalar_core(inputs, kernel, inducing, noise_std, opts)?;
        let (quad, gamma) = core.quadratic(&target_matrix(targets))?;
        let w = core.weights(&gamma)?;
        // w is M x D; point-major flattening is its row-major order
        let weights = DVector::from_iterator(w.len(), (0..w.nrows()).flat_map(|j| (0..d).map(move |k| (j, k))).map(|(j, k)| w[(j, k)]));
        (
            weights,
            expand_factor(&core.sigma_inverse_factor()?, d)?,
            expand_factor(&core.kzz, d)?,
            quad + d as f64 * core.log_det(),
        )
    } else {
        let core = dense_core(inputs, kernel, inducing, noise_std, opts)?;
        let (quad, gamma) = core.quadratic(&flatten(targets))?;
        let w = core.weights(&gamma)?;
        let nll = quad + core.log_det();
        (w.column(0).into_owned(), core.sigma_inverse_factor()?, core.kzz, nll)
    };
    if !weights.iter().all(|w| w.is_finite()) {
        return Err(invalid("non-finite prediction weights"));
    }
    Ok(SparseFieldModel {
        kernel: kernel.clone(),
        inducing: inducing.clone(),
        noise_std,
        weights,
        sigma_factor,
        kzz_factor,
        summary: TrainingSummary {
            n_points: inputs.len(),
            nll,
            used_kronecker: kronecker,
        },
    })
}

/// Predictive mean and covariance at `x`.
pub fn fitc_predict(model: &SparseFieldModel, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    model.predict(x)
}

/// Per-point quantities shared by predictions and cross-covariances.
#[derive(Debug, Clone)]
pub struct PredictiveFeatures {
    /// `K_{x,Z}`, `D x DM`.
    pub k_xz: DMatrix<f64>,
    /// `L_zz⁻¹ K_{Z,x}`.
    pub a: DMatrix<f64>,
    /// `L_Σ⁻¹ K_{Z,x}` where `L_Σ L_Σᵀ = Σ⁻¹`.
    pub c: DMatrix<f64>,
}

impl SparseFieldModel {
    /// Reassembles a model from stored parts, checking shapes.
    pub fn from_parts(
        kernel: MatrixKernel,
        inducing: InducingSet,
        noise_std: f64,
        weights: DVector<f64>,
        sigma_factor: PsdFactorization,
        kzz_factor: PsdFactorization,
        summary: TrainingSummary,
    ) -> Result<Self> {
        check_dim(kernel.input_dim(), inducing.dim())?;
        let dm = kernel.output_dim() * inducing.len();
        check_dim(dm, weights.len())?;
        check_dim(dm, sigma_factor.dim())?;
        check_dim(dm, kzz_factor.dim())?;
        if !(noise_std > 0.0) || !weights.iter().all(|w| w.is_finite()) {
            return Err(invalid("invalid model parameters"));
        }
        Ok(Self {
            kernel,
            inducing,
            noise_std,
            weights,
            sigma_factor,
            kzz_factor,
            summary,
        })
    }

    pub fn kernel(&self) -> &MatrixKernel {
        &self.kernel
    }

    pub fn inducing(&self) -> &InducingSet {
        &self.inducing
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn sigma_factor(&self) -> &PsdFactorization {
        &self.sigma_factor
    }

    pub fn kzz_factor(&self) -> &PsdFactorization {
        &self.kzz_factor
    }

    pub fn summary(&self) -> &TrainingSummary {
        &self.summary
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.kernel.output_dim()
    }

    fn k_xz(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.output_dim();
        let z = self.inducing.points();
        let mut out = DMatrix::zeros(d, d * z.len());
        let mut buf = vec![0.0; d * d];
        let mut scratch = vec![0.0; self.input_dim()];
        for (j, zj) in z.iter().enumerate() {
            self.kernel.block_unchecked(x, zj, &mut buf, &mut scratch);
            for r in 0..d {
                for c in 0..d {
                    out[(r, j * d + c)] = buf[r * d + c];
                }
            }
        }
        out
    }

    /// Predictive mean `K_{x,Z} w`.
    pub fn predict_mean(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.input_dim(), x.len())?;
        Ok(self.k_xz(x) * &self.weights)
    }

    pub fn features(&self, x: &[f64]) -> Result<PredictiveFeatures> {
        check_dim(self.input_dim(), x.len())?;
        let k_xz = self.k_xz(x);
        let kt = k_xz.transpose();
        let a = self.kzz_factor.solve_lower(&kt)?;
        let c = self.sigma_factor.solve_lower(&kt)?;
        Ok(PredictiveFeatures { k_xz, a, c })
    }

    /// Posterior covariance between the latent field at `x` and at `y`
    /// given their features.
    pub fn cross_covariance(&self, x: &[f64], fx: &PredictiveFeatures, y: &[f64], fy: &PredictiveFeatures) -> Result<DMatrix<f64>> {
        let prior = self.kernel.eval(x, y)?;
        Ok(prior - fx.a.transpose() * &fy.a + fx.c.transpose() * &fy.c)
    }

    /// Predictive mean and covariance (PSD-clamped).
    pub fn predict(&self, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let f = self.features(x)?;
        let mean = &f.k_xz * &self.weights;
        let cov = self.cross_covariance(x, &f, x, &f)?;
        Ok((mean, clamp_psd(&cov)))
    }
}
