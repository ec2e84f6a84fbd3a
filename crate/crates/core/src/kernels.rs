//! Squared-exponential kernels, matrix-valued kernels and rotation-group
//! integration (GIM) kernels.
//!
//! Matrix kernels map a pair of states to a `D x D` covariance block. Gram
//! matrices over point sets are laid out point-major: entry
//! `(i * D + a, j * D + b)` is component `(a, b)` of `k(x_i, y_j)`.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, invalid, Error, Result};

/// Default number of trapezoid nodes for the Haar integral over SO(2).
pub const DEFAULT_QUADRATURE_NODES: usize = 30;

/// Node count for the "fewer quadrature points" variant.
pub const LOW_PRECISION_QUADRATURE_NODES: usize = 8;

const INVARIANCE_TOLERANCE: f64 = 1e-8;
const INVARIANCE_SAMPLES: usize = 16;

/// Hyperparameters `(λ, l_1, …, l_D)` of the ARD squared-exponential kernel
/// `λ² exp(-½ Σ (x_j - x'_j)² / l_j²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeHyperparams {
    signal_std: f64,
    lengthscales: Vec<f64>,
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl SeHyperparams {
    pub fn new(signal_std: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !positive(signal_std) {
            return Err(invalid("signal std must be positive and finite"));
        }
        if lengthscales.is_empty() {
            return Err(invalid("at least one lengthscale is required"));
        }
        if !lengthscales.iter().all(|&l| positive(l)) {
            return Err(invalid("lengthscales must be positive and finite"));
        }
        Ok(Self {
            signal_std,
            lengthscales,
        })
    }

    /// Same lengthscale on every axis.
    pub fn isotropic(signal_std: f64, lengthscale: f64, dim: usize) -> Result<Self> {
        Self::new(signal_std, vec![lengthscale; dim])
    }

    pub fn signal_std(&self) -> f64 {
        self.signal_std
    }

    pub fn variance(&self) -> f64 {
        self.signal_std * self.signal_std
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), y.len())?;
        Ok(self.eval_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((a, b), l) in x.iter().zip(y).zip(&self.lengthscales) {
            let d = (a - b) / l;
            r2 += d * d;
        }
        self.variance() * libm::exp(-0.5 * r2)
    }
}

/// Squared-exponential covariance between two states.
pub fn se_eval(x: &[f64], y: &[f64], hyper: &SeHyperparams) -> Result<f64> {
    hyper.eval(x, y)
}

/// Probabilists' Hermite polynomial `He_n(u)`.
fn hermite(n: u8, u: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => u,
        2 => u * u - 1.0,
        3 => u * (u * u - 3.0),
        _ => {
            let u2 = u * u;
            u2 * u2 - 6.0 * u2 + 3.0
        }
    }
}

/// Mixed time derivative `∂^a/∂t^a ∂^b/∂t'^b k(t, t')` of a one-dimensional
/// SE kernel, for `a, b ≤ 2`.
///
/// With `r = t - t'` and `g(r) = λ² exp(-r²/2l²)`, the derivative is
/// `(-1)^b g^{(a+b)}(r)` and `g^{(n)}(r) = λ² (-1/l)^n He_n(r/l) exp(-r²/2l²)`.
pub fn se_time_deriv(
    t: f64,
    t_prime: f64,
    hyper: &SeHyperparams,
    order_a: u8,
    order_b: u8,
) -> Result<f64> {
    if order_a > 2 {
        return Err(Error::UnsupportedOrder(order_a));
    }
    if order_b > 2 {
        return Err(Error::UnsupportedOrder(order_b));
    }
    check_dim(1, hyper.dim())?;
    Ok(se_time_deriv_unchecked(t, t_prime, hyper, order_a, order_b))
}

#[inline]
pub(crate) fn se_time_deriv_unchecked(
    t: f64,
    t_prime: f64,
    hyper: &SeHyperparams,
    order_a: u8,
    order_b: u8,
) -> f64 {
    let l = hyper.lengthscales[0];
    let u = (t - t_prime) / l;
    let n = order_a + order_b;
    let mut scale = hyper.variance() * libm::exp(-0.5 * u * u) * hermite(n, u);
    for _ in 0..n {
        scale /= l;
    }
    // (-1)^n from the chain rule on r/l and (-1)^b from ∂/∂t' = -d/dr
    if (n + order_b) % 2 == 1 {
        -scale
    } else {
        scale
    }
}

/// One-parameter rotation group acting on `R^{2B}` by the same planar
/// rotation `R_ρ` on each of `B` consecutive coordinate pairs.
///
/// `B = 1` is planar rotation; `B = 2` is the action on `(q, q̇)` used for
/// the Kepler problem. The Haar integral is approximated by the trapezoid
/// rule with `quadrature_nodes` equally spaced angles.
#[derive(Debug, Clone)]
pub struct GroupAction {
    blocks: usize,
    quadrature_nodes: usize,
    nodes: Vec<(f64, f64)>,
}

impl PartialEq for GroupAction {
    fn eq(&self, other: &Self) -> bool {
        self.blocks == other.blocks && self.quadrature_nodes == other.quadrature_nodes
    }
}

impl GroupAction {
    pub fn new(blocks: usize, quadrature_nodes: usize) -> Result<Self> {
        if blocks == 0 {
            return Err(invalid("group action needs at least one rotation block"));
        }
        if quadrature_nodes < 4 {
            return Err(invalid("at least 4 quadrature nodes are required"));
        }
        // nodes j and Q - j are exact mirror images (c, s) and (c, -s)
        let nodes = (0..quadrature_nodes)
            .map(|j| {
                let (m, sign) = if 2 * j <= quadrature_nodes {
                    (j, 1.0)
                } else {
                    (quadrature_nodes - j, -1.0)
                };
                if 2 * m == quadrature_nodes {
                    return (-1.0, 0.0);
                }
                let rho = 2.0 * PI * m as f64 / quadrature_nodes as f64;
                (libm::cos(rho), sign * libm::sin(rho))
            })
            .collect();
        Ok(Self {
            blocks,
            quadrature_nodes,
            nodes,
        })
    }

    /// Planar rotations of `R^2`.
    pub fn planar(quadrature_nodes: usize) -> Result<Self> {
        Self::new(1, quadrature_nodes)
    }

    /// `diag(R_ρ, R_ρ)` acting on `(q, q̇) ∈ R^4`.
    pub fn paired_planar(quadrature_nodes: usize) -> Result<Self> {
        Self::new(2, quadrature_nodes)
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn state_dim(&self) -> usize {
        2 * self.blocks
    }

    /// Dimension of the quotient space `X / G`.
    pub fn quotient_dim(&self) -> usize {
        self.state_dim() - 1
    }

    pub fn quadrature_nodes(&self) -> usize {
        self.quadrature_nodes
    }

    /// Same group with a different quadrature resolution.
    pub fn with_quadrature_nodes(&self, quadrature_nodes: usize) -> Result<Self> {
        Self::new(self.blocks, quadrature_nodes)
    }

    /// Representation matrix `γ_ρ`.
    pub fn matrix(&self, rho: f64) -> DMatrix<f64> {
        let (s, c) = libm::sincos(rho);
        let d = self.state_dim();
        let mut m = DMatrix::zeros(d, d);
        for b in 0..self.blocks {
            let i = 2 * b;
            m[(i, i)] = c;
            m[(i, i + 1)] = -s;
            m[(i + 1, i)] = s;
            m[(i + 1, i + 1)] = c;
        }
        m
    }

    /// `γ_ρ x`.
    pub fn apply(&self, rho: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.state_dim(), x.len())?;
        let (s, c) = libm::sincos(rho);
        let mut out = vec![0.0; x.len()];
        rotate_blocks(c, s, x, &mut out);
        Ok(out)
    }

    /// Angle `ρ` with `γ_{-ρ} x` on the section `x_2 = 0, x_1 ≥ 0`.
    pub fn section_angle(&self, x: &[f64]) -> f64 {
        libm::atan2(x[1], x[0])
    }
}

#[inline]
fn rotate_blocks(c: f64, s: f64, x: &[f64], out: &mut [f64]) {
    for (src, dst) in x.chunks_exact(2).zip(out.chunks_exact_mut(2)) {
        dst[0] = c * src[0] - s * src[1];
        dst[1] = s * src[0] + c * src[1];
    }
}

/// `γ_ρ x` for a rotation-group action.
pub fn apply_action(action: &GroupAction, rho: f64, x: &[f64]) -> Result<Vec<f64>> {
    action.apply(rho, x)
}

/// Ties the lengthscales inside each rotation block to their geometric
/// mean, which makes the SE kernel invariant under the action.
pub fn isotropize(hyper: &SeHyperparams, action: &GroupAction) -> SeHyperparams {
    let mut lengthscales = hyper.lengthscales.clone();
    for b in 0..action.blocks() {
        let i = 2 * b;
        if i + 1 >= lengthscales.len() {
            break;
        }
        let g = libm::sqrt(lengthscales[i] * lengthscales[i + 1]);
        lengthscales[i] = g;
        lengthscales[i + 1] = g;
    }
    SeHyperparams {
        signal_std: hyper.signal_std,
        lengthscales,
    }
}

/// Group-integration matrix kernel evaluated by the trapezoid rule,
/// normalized so the group has unit volume:
/// `k(x, x') = (1/Q) Σ_j k(x, γ_{ρ_j} x') γ_{ρ_j}`.
///
/// The scalar kernel must be invariant under the action; this function does
/// not check it (see [`GimKernel::new`]).
pub fn gim_eval(
    hyper: &SeHyperparams,
    action: &GroupAction,
    x: &[f64],
    y: &[f64],
) -> Result<DMatrix<f64>> {
    let d = action.state_dim();
    check_dim(d, hyper.dim())?;
    check_dim(d, x.len())?;
    check_dim(d, y.len())?;
    let mut buf = vec![0.0; d * d];
    let mut scratch = vec![0.0; d];
    gim_block(hyper, action, x, y, &mut buf, &mut scratch);
    Ok(DMatrix::from_row_slice(d, d, &buf))
}

fn gim_block(
    hyper: &SeHyperparams,
    action: &GroupAction,
    x: &[f64],
    y: &[f64],
    out: &mut [f64],
    scratch: &mut [f64],
) {
    let d = action.state_dim();
    out.iter_mut().for_each(|v| *v = 0.0);
    let q = action.quadrature_nodes;
    let weight = 1.0 / q as f64;
    let mut accumulate = |c: f64, s: f64, k_cos: f64, k_sin: f64| {
        for b in 0..action.blocks {
            let i = 2 * b;
            out[i * d + i] += k_cos * c;
            out[i * d + i + 1] -= k_sin * s;
            out[(i + 1) * d + i] += k_sin * s;
            out[(i + 1) * d + i + 1] += k_cos * c;
        }
    };
    // Mirror nodes are summed as pairs so that the sine parts cancel exactly
    // whenever k(x, γ_j y) = k(x, γ_{-j} y), e.g. for points on the section.
    for j in 0..=q / 2 {
        let (c, s) = action.nodes[j];
        rotate_blocks(c, s, y, scratch);
        let kp = weight * hyper.eval_unchecked(x, scratch);
        if j == 0 || 2 * j == q {
            accumulate(c, s, kp, kp);
            continue;
        }
        rotate_blocks(c, -s, y, scratch);
        let km = weight * hyper.eval_unchecked(x, scratch);
        accumulate(c, s, kp + km, kp - km);
    }
}

/// SE kernel paired with a rotation action, validated for invariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GimKernel {
    base: SeHyperparams,
    action: GroupAction,
}

impl GimKernel {
    /// Checks `|k(γx, γx') - k(x, x')| ≤ 1e-8 λ²` on seeded random samples.
    pub fn new(base: SeHyperparams, action: GroupAction) -> Result<Self> {
        let d = action.state_dim();
        check_dim(d, base.dim())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x61u64);
        let mut worst: f64 = 0.0;
        for _ in 0..INVARIANCE_SAMPLES {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let rho = rng.random_range(0.0..2.0 * PI);
            let gx = action.apply(rho, &x)?;
            let gy = action.apply(rho, &y)?;
            let dev = libm::fabs(base.eval_unchecked(&gx, &gy) - base.eval_unchecked(&x, &y));
            worst = worst.max(dev);
        }
        if worst > INVARIANCE_TOLERANCE * base.variance() {
            return Err(Error::NonInvariantKernel(worst));
        }
        Ok(Self { base, action })
    }

    pub fn base(&self) -> &SeHyperparams {
        &self.base
    }

    pub fn action(&self) -> &GroupAction {
        &self.action
    }
}

/// One `k_i(x, x') Q_i` term of an uncoupled separable matrix kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct UsmTerm {
    pub kernel: SeHyperparams,
    pub mixing: DMatrix<f64>,
}

/// Matrix-valued covariance function.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixKernel {
    /// `diag(k_1, …, k_D)`, one SE kernel per output.
    DiagonalIndependent(Vec<SeHyperparams>),
    /// `k · I_D`.
    SharedIsotropic {
        base: SeHyperparams,
        output_dim: usize,
    },
    /// `Σ_i k_i Q_i` with fixed PSD mixing matrices.
    Usm(Vec<UsmTerm>),
    /// Group-integration kernel; equivariant under the action.
    Gim(GimKernel),
}

impl MatrixKernel {
    pub fn shared_isotropic(base: SeHyperparams, output_dim: usize) -> Result<Self> {
        if output_dim == 0 {
            return Err(invalid("output dimension must be positive"));
        }
        Ok(Self::SharedIsotropic { base, output_dim })
    }

    pub fn diagonal_independent(kernels: Vec<SeHyperparams>) -> Result<Self> {
        let first = kernels.first().ok_or_else(|| invalid("no component kernels"))?;
        let dim = first.dim();
        for k in &kernels {
            check_dim(dim, k.dim())?;
        }
        Ok(Self::DiagonalIndependent(kernels))
    }

    pub fn usm(terms: Vec<UsmTerm>) -> Result<Self> {
        let first = terms.first().ok_or_else(|| invalid("no USM terms"))?;
        let in_dim = first.kernel.dim();
        let out_dim = first.mixing.nrows();
        for t in &terms {
            check_dim(in_dim, t.kernel.dim())?;
            check_dim(out_dim, t.mixing.nrows())?;
            check_dim(out_dim, t.mixing.ncols())?;
            let asym = (&t.mixing - t.mixing.transpose()).amax();
            let scale = t.mixing.amax().max(f64::MIN_POSITIVE);
            if asym > 1e-12 * scale {
                return Err(invalid("USM mixing matrix must be symmetric"));
            }
            let eig = t.mixing.clone().symmetric_eigen();
            if eig.eigenvalues.min() < -1e-12 * scale {
                return Err(invalid("USM mixing matrix must be positive semidefinite"));
            }
        }
        Ok(Self::Usm(terms))
    }

    pub fn gim(base: SeHyperparams, action: GroupAction) -> Result<Self> {
        Ok(Self::Gim(GimKernel::new(base, action)?))
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::DiagonalIndependent(ks) => ks[0].dim(),
            Self::SharedIsotropic { base, .. } => base.dim(),
            Self::Usm(terms) => terms[0].kernel.dim(),
            Self::Gim(g) => g.action.state_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::DiagonalIndependent(ks) => ks.len(),
            Self::SharedIsotropic { output_dim, .. } => *output_dim,
            Self::Usm(terms) => terms[0].mixing.nrows(),
            Self::Gim(g) => g.action.state_dim(),
        }
    }

    pub fn group_action(&self) -> Option<&GroupAction> {
        match self {
            Self::Gim(g) => Some(&g.action),
            _ => None,
        }
    }

    /// The `D x D` block `k(x, x')`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.input_dim(), x.len())?;
        check_dim(self.input_dim(), y.len())?;
        let d = self.output_dim();
        let mut buf = vec![0.0; d * d];
        let mut scratch = vec![0.0; self.input_dim()];
        self.block_unchecked(x, y, &mut buf, &mut scratch);
        Ok(DMatrix::from_row_slice(d, d, &buf))
    }

    /// Writes `k(x, y)` row-major into `out` (`D*D` entries). `scratch` must
    /// hold `input_dim` entries.
    pub(crate) fn block_unchecked(&self, x: &[f64], y: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let d = self.output_dim();
        match self {
            Self::DiagonalIndependent(ks) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for (i, k) in ks.iter().enumerate() {
                    out[i * d + i] = k.eval_unchecked(x, y);
                }
            }
            Self::SharedIsotropic { base, .. } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                let k = base.eval_unchecked(x, y);
                for i in 0..d {
                    out[i * d + i] = k;
                }
            }
            Self::Usm(terms) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for t in terms {
                    let k = t.kernel.eval_unchecked(x, y);
                    for i in 0..d {
                        for j in 0..d {
                            out[i * d + j] += k * t.mixing[(i, j)];
                        }
                    }
                }
            }
            Self::Gim(g) => gim_block(&g.base, &g.action, x, y, out, scratch),
        }
    }

    /// Diagonal of `k(x, x)`.
    pub(crate) fn self_diagonal(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::DiagonalIndependent(ks) => {
                for (o, k) in out.iter_mut().zip(ks) {
                    *o = k.variance();
                }
            }
            Self::SharedIsotropic { base, .. } => out.iter_mut().for_each(|o| *o = base.variance()),
            Self::Usm(terms) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for t in terms {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += t.kernel.variance() * t.mixing[(i, i)];
                    }
                }
            }
            Self::Gim(_) => {
                let d = self.output_dim();
                let mut buf = vec![0.0; d * d];
                let mut scratch = vec![0.0; d];
                self.block_unchecked(x, x, &mut buf, &mut scratch);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = buf[i * d + i];
                }
            }
        }
    }

    /// Flattened positive hyperparameters.
    ///
    /// Layouts: shared `[λ, l_1..l_D]`; diagonal and USM concatenate
    /// `[λ_i, l_i..]` per component; GIM `[λ, l_block_1..l_block_B]` with
    /// lengthscales tied inside each rotation block.
    pub fn hyperparams(&self) -> Vec<f64> {
        fn push(out: &mut Vec<f64>, h: &SeHyperparams) {
            out.push(h.signal_std);
            out.extend_from_slice(&h.lengthscales);
        }
        let mut out = Vec::new();
        match self {
            Self::DiagonalIndependent(ks) => ks.iter().for_each(|k| push(&mut out, k)),
            Self::SharedIsotropic { base, .. } => push(&mut out, base),
            Self::Usm(terms) => terms.iter().for_each(|t| push(&mut out, &t.kernel)),
            Self::Gim(g) => {
                out.push(g.base.signal_std);
                for b in 0..g.action.blocks() {
                    out.push(g.base.lengthscales[2 * b]);
                }
            }
        }
        out
    }

    pub fn n_hyperparams(&self) -> usize {
        match self {
            Self::DiagonalIndependent(ks) => ks.iter().map(|k| 1 + k.dim()).sum(),
            Self::SharedIsotropic { base, .. } => 1 + base.dim(),
            Self::Usm(terms) => terms.iter().map(|t| 1 + t.kernel.dim()).sum(),
            Self::Gim(g) => 1 + g.action.blocks(),
        }
    }

    /// Indices of signal-std entries in [`Self::hyperparams`].
    pub fn signal_std_indices(&self) -> Vec<usize> {
        match self {
            Self::DiagonalIndependent(ks) => {
                let mut idx = Vec::with_capacity(ks.len());
                let mut at = 0;
                for k in ks {
                    idx.push(at);
                    at += 1 + k.dim();
                }
                idx
            }
            Self::Usm(terms) => {
                let mut idx = Vec::with_capacity(terms.len());
                let mut at = 0;
                for t in terms {
                    idx.push(at);
                    at += 1 + t.kernel.dim();
                }
                idx
            }
            Self::SharedIsotropic { .. } | Self::Gim(_) => vec![0],
        }
    }

    /// Same kernel structure with new hyperparameters (layout as in
    /// [`Self::hyperparams`]).
    pub fn with_hyperparams(&self, params: &[f64]) -> Result<Self> {
        check_dim(self.n_hyperparams(), params.len())?;
        fn take(params: &[f64], at: &mut usize, dim: usize) -> Result<SeHyperparams> {
            let h = SeHyperparams::new(params[*at], params[*at + 1..*at + 1 + dim].to_vec())?;
            *at += 1 + dim;
            Ok(h)
        }
        let mut at = 0;
        Ok(match self {
            Self::DiagonalIndependent(ks) => Self::DiagonalIndependent(
                ks.iter()
                    .map(|k| take(params, &mut at, k.dim()))
                    .collect::<Result<_>>()?,
            ),
            Self::SharedIsotropic { base, output_dim } => Self::SharedIsotropic {
                base: take(params, &mut at, base.dim())?,
                output_dim: *output_dim,
            },
            Self::Usm(terms) => Self::Usm(
                terms
                    .iter()
                    .map(|t| {
                        Ok(UsmTerm {
                            kernel: take(params, &mut at, t.kernel.dim())?,
                            mixing: t.mixing.clone(),
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            Self::Gim(g) => {
                let mut ls = Vec::with_capacity(g.action.state_dim());
                for &l in &params[1..] {
                    ls.push(l);
                    ls.push(l);
                }
                // tied lengthscales are invariant by construction
                Self::Gim(GimKernel {
                    base: SeHyperparams::new(params[0], ls)?,
                    action: g.action.clone(),
                })
            }
        })
    }
}

/// Variant-dispatched matrix kernel evaluation.
pub fn matrix_eval(kernel: &MatrixKernel, x: &[f64], y: &[f64]) -> Result<DMatrix<f64>> {
    kernel.eval(x, y)
}

fn check_points(kernel: &MatrixKernel, pts: &[Vec<f64>]) -> Result<()> {
    for p in pts {
        check_dim(kernel.input_dim(), p.len())?;
    }
    Ok(())
}

/// Gram matrix `K_{A,B}` of size `(|A| D) x (|B| D)`.
pub fn gram(kernel: &MatrixKernel, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    check_points(kernel, a)?;
    check_points(kernel, b)?;
    let d = kernel.output_dim();
    let mut out = DMatrix::zeros(a.len() * d, b.len() * d);
    let mut buf = vec![0.0; d * d];
    let mut scratch = vec![0.0; kernel.input_dim()];
    for (j, y) in b.iter().enumerate() {
        for (i, x) in a.iter().enumerate() {
            kernel.block_unchecked(x, y, &mut buf, &mut scratch);
            for r in 0..d {
                for c in 0..d {
                    out[(i * d + r, j * d + c)] = buf[r * d + c];
                }
            }
        }
    }
    Ok(out)
}

/// Symmetric Gram matrix `K_{A,A}`; lower blocks are mirrored.
pub fn gram_symmetric(kernel: &MatrixKernel, a: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    check_points(kernel, a)?;
    let d = kernel.output_dim();
    let n = a.len() * d;
    let mut out = DMatrix::zeros(n, n);
    let mut buf = vec![0.0; d * d];
    let mut scratch = vec![0.0; kernel.input_dim()];
    for j in 0..a.len() {
        for i in j..a.len() {
            kernel.block_unchecked(&a[i], &a[j], &mut buf, &mut scratch);
            for r in 0..d {
                for c in 0..d {
                    let v = buf[r * d + c];
                    out[(i * d + r, j * d + c)] = v;
                    out[(j * d + c, i * d + r)] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Scalar Gram matrix of the `(0, 0)` component, for kernels whose blocks
/// are multiples of the identity on the given points.
pub(crate) fn scalar_gram(kernel: &MatrixKernel, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    check_points(kernel, a)?;
    check_points(kernel, b)?;
    let d = kernel.output_dim();
    let mut out = DMatrix::zeros(a.len(), b.len());
    let mut buf = vec![0.0; d * d];
    let mut scratch = vec![0.0; kernel.input_dim()];
    for (j, y) in b.iter().enumerate() {
        for (i, x) in a.iter().enumerate() {
            kernel.block_unchecked(x, y, &mut buf, &mut scratch);
            out[(i, j)] = buf[0];
        }
    }
    Ok(out)
}

/// Symmetric scalar Gram matrix; lower entries are mirrored exactly as in
/// [`gram_symmetric`].
pub(crate) fn scalar_gram_symmetric(kernel: &MatrixKernel, a: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    check_points(kernel, a)?;
    let d = kernel.output_dim();
    let mut out = DMatrix::zeros(a.len(), a.len());
    let mut buf = vec![0.0; d * d];
    let mut scratch = vec![0.0; kernel.input_dim()];
    for j in 0..a.len() {
        for i in j..a.len() {
            kernel.block_unchecked(&a[i], &a[j], &mut buf, &mut scratch);
            out[(i, j)] = buf[0];
            out[(j, i)] = buf[0];
        }
    }
    Ok(out)
}
