//! Reference systems, fixed-step integrators and first integrals.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, invalid, Error, Result};
use crate::kernels::GroupAction;

/// Below this radius the Kepler right-hand side is treated as singular.
pub const KEPLER_SINGULAR_RADIUS: f64 = 1e-12;

/// Autonomous right-hand side `ẋ = f(x)`.
pub trait VectorField {
    fn dim(&self) -> usize;

    /// Writes `f(x)` into `out`.
    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// Known states with `f = 0`.
    fn fixed_points(&self) -> Vec<Vec<f64>> {
        Vec::new()
    }

    /// Linear symmetry group of the field, if any.
    fn symmetry(&self) -> Option<GroupAction> {
        None
    }
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).eval(x, out)
    }
    fn fixed_points(&self) -> Vec<Vec<f64>> {
        (**self).fixed_points()
    }
    fn symmetry(&self) -> Option<GroupAction> {
        (**self).symmetry()
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &mut [f64]) -> Result<()>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], &mut [f64]) -> Result<()>,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(x, out)
    }
}

/// `ẋ = A (x_1³, x_2³)` with `A = [[-0.1, 2], [-2, -0.1]]`.
pub fn spiral_rhs(x: &[f64; 2]) -> [f64; 2] {
    let c1 = x[0] * x[0] * x[0];
    let c2 = x[1] * x[1] * x[1];
    [-0.1 * c1 + 2.0 * c2, -2.0 * c1 - 0.1 * c2]
}

/// Cubic spiral with a single stable fixed point at the origin.
#[derive(Debug, Clone, Copy, Default)]
pub struct Spiral;

impl VectorField for Spiral {
    fn dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(2, x.len())?;
        let f = spiral_rhs(&[x[0], x[1]]);
        out[..2].copy_from_slice(&f);
        Ok(())
    }
    fn fixed_points(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0, 0.0]]
    }
}

/// `q̈ = -ν q / |q|³`.
pub fn kepler_accel(q: &[f64], nu: f64) -> Result<[f64; 2]> {
    check_dim(2, q.len())?;
    let r = libm::hypot(q[0], q[1]);
    if r < KEPLER_SINGULAR_RADIUS {
        return Err(Error::SingularState(r));
    }
    let s = -nu / (r * r * r);
    Ok([s * q[0], s * q[1]])
}

/// First-order Kepler field on `(q, q̇)`.
pub fn kepler_rhs(state: &[f64], nu: f64) -> Result<[f64; 4]> {
    check_dim(4, state.len())?;
    let a = kepler_accel(&state[..2], nu)?;
    Ok([state[2], state[3], a[0], a[1]])
}

/// `H = ½|q̇|² - ν/|q|`.
pub fn hamiltonian(q: &[f64], qdot: &[f64], nu: f64) -> Result<f64> {
    check_dim(2, q.len())?;
    check_dim(2, qdot.len())?;
    let r = libm::hypot(q[0], q[1]);
    if r < KEPLER_SINGULAR_RADIUS {
        return Err(Error::SingularState(r));
    }
    Ok(0.5 * (qdot[0] * qdot[0] + qdot[1] * qdot[1]) - nu / r)
}

/// `J = q_1 q̇_2 - q̇_1 q_2`.
pub fn angular_momentum(q: &[f64], qdot: &[f64]) -> f64 {
    q[0] * qdot[1] - qdot[0] * q[1]
}

/// Kepler problem `q̈ = -ν q/|q|³` in first-order form.
#[derive(Debug, Clone, Copy)]
pub struct Kepler {
    pub nu: f64,
}

impl Default for Kepler {
    fn default() -> Self {
        Self { nu: 1.0 }
    }
}

impl Kepler {
    /// Default initial state `(q, q̇) = (1, 0, 0, 1.1)`.
    pub const DEFAULT_INITIAL_STATE: [f64; 4] = [1.0, 0.0, 0.0, 1.1];

    /// Orbital period of the bound orbit through `state`, from the energy via
    /// the semi-major axis `a = -ν / 2H`.
    pub fn period(&self, state: &[f64]) -> Result<f64> {
        check_dim(4, state.len())?;
        let h = hamiltonian(&state[..2], &state[2..], self.nu)?;
        if h >= 0.0 {
            return Err(invalid("orbit is unbound (H >= 0)"));
        }
        let a = -self.nu / (2.0 * h);
        Ok(2.0 * PI * libm::sqrt(a * a * a / self.nu))
    }
}

impl VectorField for Kepler {
    fn dim(&self) -> usize {
        4
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let f = kepler_rhs(x, self.nu)?;
        out[..4].copy_from_slice(&f);
        Ok(())
    }
    fn symmetry(&self) -> Option<GroupAction> {
        GroupAction::paired_planar(crate::kernels::DEFAULT_QUADRATURE_NODES).ok()
    }
}

/// Time-stamped states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Vec<Vec<f64>>) -> Result<Self> {
        check_dim(times.len(), states.len())?;
        if times.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = states[0].len();
        if d == 0 {
            return Err(invalid("states must have at least one component"));
        }
        for s in &states {
            check_dim(d, s.len())?;
        }
        if !times.iter().all(|t| t.is_finite()) {
            return Err(invalid("times must be finite"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("times must be strictly increasing"));
        }
        Ok(Self { times, states })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Component `d` of every state.
    pub fn component(&self, d: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[d]).collect()
    }

    /// Keeps state components `start..end`.
    pub fn select_components(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.dim() {
            return Err(invalid("component range out of bounds"));
        }
        Ok(Self {
            times: self.times.clone(),
            states: self.states.iter().map(|s| s[start..end].to_vec()).collect(),
        })
    }

    /// Piecewise-linear interpolation; clamps outside the time range.
    pub fn interpolate(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.states[n - 1].clone();
        }
        let hi = self.times.partition_point(|&s| s <= t);
        let lo = hi - 1;
        let w = (t - self.times[lo]) / (self.times[hi] - self.times[lo]);
        self.states[lo]
            .iter()
            .zip(&self.states[hi])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    /// Linear resampling onto `n` equidistant times spanning `[start, end]`.
    pub fn resample(&self, start: f64, end: f64, n: usize) -> Result<Self> {
        let times = equidistant(start, end, n)?;
        let states = times.iter().map(|&t| self.interpolate(t)).collect();
        Trajectory::new(times, states)
    }
}

/// `n` equidistant points including both endpoints.
pub fn equidistant(start: f64, end: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(end > start) {
        return Err(invalid("need n >= 2 and end > start"));
    }
    let h = (end - start) / (n - 1) as f64;
    Ok((0..n)
        .map(|k| if k == n - 1 { end } else { start + k as f64 * h })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegratorMethod {
    Rk4,
    Euler,
    ImplicitMidpoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub method: IntegratorMethod,
    pub dt: f64,
    /// Fixed-point iteration tolerance of the implicit solve.
    pub implicit_tol: f64,
    pub implicit_max_iters: usize,
}

impl IntegratorConfig {
    pub fn new(method: IntegratorMethod, dt: f64) -> Self {
        Self {
            method,
            dt,
            implicit_tol: 1e-12,
            implicit_max_iters: 100,
        }
    }

    pub fn rk4(dt: f64) -> Self {
        Self::new(IntegratorMethod::Rk4, dt)
    }

    pub fn euler(dt: f64) -> Self {
        Self::new(IntegratorMethod::Euler, dt)
    }

    pub fn implicit_midpoint(dt: f64) -> Self {
        Self::new(IntegratorMethod::ImplicitMidpoint, dt)
    }
}

fn axpy_into(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

fn rk4_step<F: VectorField + ?Sized>(f: &F, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let d = x.len();
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    f.eval(x, &mut k1)?;
    axpy_into(&mut tmp, x, 0.5 * h, &k1);
    f.eval(&tmp, &mut k2)?;
    axpy_into(&mut tmp, x, 0.5 * h, &k2);
    f.eval(&tmp, &mut k3)?;
    axpy_into(&mut tmp, x, h, &k3);
    f.eval(&tmp, &mut k4)?;
    Ok((0..d)
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

fn euler_step<F: VectorField + ?Sized>(f: &F, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut k = vec![0.0; x.len()];
    f.eval(x, &mut k)?;
    Ok(x.iter().zip(&k).map(|(a, b)| a + h * b).collect())
}

/// One implicit midpoint step `x' = x + h f((x + x')/2)` solved by
/// fixed-point iteration from the explicit Euler predictor. Returns `None`
/// when the iteration does not converge.
fn midpoint_solve<F: VectorField + ?Sized>(
    f: &F,
    x: &[f64],
    h: f64,
    cfg: &IntegratorConfig,
) -> Result<Option<Vec<f64>>> {
    let d = x.len();
    let mut k = vec![0.0; d];
    f.eval(x, &mut k)?;
    let mut next: Vec<f64> = x.iter().zip(&k).map(|(a, b)| a + h * b).collect();
    let mut mid = vec![0.0; d];
    for _ in 0..cfg.implicit_max_iters {
        for i in 0..d {
            mid[i] = 0.5 * (x[i] + next[i]);
        }
        f.eval(&mid, &mut k)?;
        let mut delta: f64 = 0.0;
        let mut scale: f64 = 1.0;
        for i in 0..d {
            let v = x[i] + h * k[i];
            delta = delta.max(libm::fabs(v - next[i]));
            scale = scale.max(libm::fabs(v));
            next[i] = v;
        }
        if !delta.is_finite() {
            return Ok(None);
        }
        if delta <= cfg.implicit_tol * scale {
            return Ok(Some(next));
        }
    }
    Ok(None)
}

/// Advances `x` by one step of size `h` (which may be negative).
///
/// A non-converging implicit midpoint solve is retried once as two half
/// steps before reporting [`Error::NoConvergence`].
pub fn step<F: VectorField + ?Sized>(
    f: &F,
    x: &[f64],
    h: f64,
    cfg: &IntegratorConfig,
    t: f64,
) -> Result<Vec<f64>> {
    match cfg.method {
        IntegratorMethod::Rk4 => rk4_step(f, x, h),
        IntegratorMethod::Euler => euler_step(f, x, h),
        IntegratorMethod::ImplicitMidpoint => {
            if let Some(next) = midpoint_solve(f, x, h, cfg)? {
                return Ok(next);
            }
            let half = midpoint_solve(f, x, 0.5 * h, cfg)?
                .ok_or(Error::NoConvergence { time: t })?;
            midpoint_solve(f, &half, 0.5 * h, cfg)?.ok_or(Error::NoConvergence { time: t + 0.5 * h })
        }
    }
}

fn at_time(err: Error, time: f64) -> Error {
    match err {
        e @ Error::NoConvergence { .. } => e,
        other => Error::IntegrationFailed {
            time,
            source: Box::new(other),
        },
    }
}

/// Integrates `f` from `x0` over `t_span = (t0, t1)` with fixed steps of
/// `cfg.dt`; the last step is shortened to land exactly on `t1`.
pub fn integrate<F: VectorField + ?Sized>(
    f: &F,
    x0: &[f64],
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    check_dim(f.dim(), x0.len())?;
    let (t0, t1) = t_span;
    if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
        return Err(invalid("step size must be positive"));
    }
    if !(t1 > t0) {
        return Err(invalid("time span must have t1 > t0"));
    }
    let span = t1 - t0;
    let tol = 1e-9 * cfg.dt;
    let full_steps = libm::floor(span / cfg.dt + 1e-9) as usize;
    let mut times = Vec::with_capacity(full_steps + 2);
    let mut states = Vec::with_capacity(full_steps + 2);
    times.push(t0);
    states.push(x0.to_vec());
    let mut x = x0.to_vec();
    for k in 1..=full_steps {
        let t = t0 + (k - 1) as f64 * cfg.dt;
        x = step(f, &x, cfg.dt, cfg, t).map_err(|e| at_time(e, t))?;
        times.push(t0 + k as f64 * cfg.dt);
        states.push(x.clone());
    }
    let last = t0 + full_steps as f64 * cfg.dt;
    let rest = t1 - last;
    if rest > tol {
        x = step(f, &x, rest, cfg, last).map_err(|e| at_time(e, last))?;
        times.push(t1);
        states.push(x);
    } else if let Some(t) = times.last_mut() {
        *t = t1;
    }
    Trajectory::new(times, states)
}

/// Placement of sample times inside the span `(t0, t1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleGrid {
    /// `t_i = t0 + i (t1 - t0)/N`, `i = 1..N`.
    #[default]
    OpenStart,
    /// `N` points from `t0` to `t1` inclusive.
    Closed,
}

/// Simulates `f` with RK4 at step `span / (1000 N)` and returns `N`
/// equidistant samples with additive Gaussian noise of std `noise_std`.
pub fn sample_trajectory_to_data<F: VectorField + ?Sized>(
    f: &F,
    x0: &[f64],
    t_span: (f64, f64),
    n: usize,
    noise_std: f64,
    seed: u64,
    grid: SampleGrid,
) -> Result<Trajectory> {
    check_dim(f.dim(), x0.len())?;
    if n < 2 {
        return Err(invalid("need at least two samples"));
    }
    if !(noise_std >= 0.0) {
        return Err(invalid("noise std must be non-negative"));
    }
    let (t0, t1) = t_span;
    if !(t1 > t0) {
        return Err(invalid("time span must have t1 > t0"));
    }
    let span = t1 - t0;
    let intervals = match grid {
        SampleGrid::OpenStart => n,
        SampleGrid::Closed => n - 1,
    };
    let sub_steps = 1000 * n / intervals;
    let h = span / (intervals * sub_steps) as f64;
    let cfg = IntegratorConfig::rk4(h);

    let mut times = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    if grid == SampleGrid::Closed {
        times.push(t0);
        states.push(x0.to_vec());
    }
    let mut x = x0.to_vec();
    for i in 1..=intervals {
        for s in 0..sub_steps {
            let t = t0 + ((i - 1) * sub_steps + s) as f64 * h;
            x = rk4_step(f, &x, h).map_err(|e| at_time(e, t))?;
        }
        times.push(if i == intervals {
            t1
        } else {
            t0 + i as f64 * span / intervals as f64
        });
        states.push(x.clone());
    }
    let _ = cfg;

    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut states {
            for v in s.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += noise_std * z;
            }
        }
    }
    Trajectory::new(times, states)
}
