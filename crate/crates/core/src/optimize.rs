//! Derivative-free minimization with restarted Nelder–Mead over
//! log-transformed positive parameters.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, invalid, Error, Result};

const REFLECTION: f64 = 1.0;
const EXPANSION: f64 = 2.0;
const CONTRACTION: f64 = 0.5;
const SHRINK: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    /// Iterations per run.
    pub max_iters: usize,
    /// Simplex diameter (max-norm) at which a run stops.
    pub x_tol: f64,
    /// Relative spread of simplex values at which a run stops.
    pub f_tol: f64,
    /// Edge length of the initial simplex and half-width of restart jitter.
    pub initial_step: f64,
    /// Additional jittered runs after the one started at `x0`.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            x_tol: 1e-6,
            f_tol: 1e-9,
            initial_step: 0.25,
            restarts: 3,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be at least 1"));
        }
        if !(self.x_tol > 0.0) || !(self.f_tol > 0.0) || !(self.initial_step > 0.0) {
            return Err(invalid("optimizer tolerances and step must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// Iterations of the winning run.
    pub iterations: usize,
    /// Whether the winning run met a tolerance before `max_iters`.
    pub converged: bool,
    /// Objective evaluations across all runs.
    pub evaluations: usize,
}

/// Closed box `[lower, upper]` per coordinate; infinite ends are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        check_dim(n, self.lower.len())?;
        check_dim(n, self.upper.len())?;
        for (axis, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::InvalidBounds { axis });
            }
        }
        Ok(())
    }

    fn clamp(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.max(*lo).min(*hi);
        }
    }
}

struct Run {
    x: Vec<f64>,
    f: f64,
    iterations: usize,
    converged: bool,
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

fn single_run<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x0: &[f64],
    f0: f64,
    cfg: &OptimizerConfig,
    bounds: &Bounds,
    evals: &mut usize,
) -> Run {
    let n = x0.len();
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        sanitize(f(x))
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut values: Vec<f64> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    values.push(f0);
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += cfg.initial_step;
        bounds.clamp(&mut v);
        if v[i] == x0[i] {
            v[i] = x0[i] - cfg.initial_step;
            bounds.clamp(&mut v);
        }
        values.push(eval(&v, evals));
        simplex.push(v);
    }

    let mut order: Vec<usize> = (0..=n).collect();
    let mut iterations = 0;
    let mut converged = false;
    let mut centroid = vec![0.0; n];
    let point = |c: &[f64], toward: &[f64], t: f64, out: &mut Vec<f64>| {
        out.clear();
        out.extend(c.iter().zip(toward).map(|(ci, wi)| ci + t * (wi - ci)));
    };
    let mut xr = Vec::with_capacity(n);
    let mut xe = Vec::with_capacity(n);
    let mut xc = Vec::with_capacity(n);

    loop {
        // stable sort keeps earlier vertices ahead on ties
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let lo = order[0];
        let hi = order[n];
        let f_lo = values[lo];
        let f_hi = values[hi];

        let diameter = simplex
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[lo]).map(|(a, b)| libm::fabs(a - b)))
            .fold(0.0, f64::max);
        let spread_ok = f_hi.is_finite() && f_hi - f_lo <= cfg.f_tol * (libm::fabs(f_lo) + libm::fabs(f_hi));
        if diameter < cfg.x_tol || spread_ok {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iters {
            break;
        }
        iterations += 1;

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &i in &order[..n] {
            for (c, v) in centroid.iter_mut().zip(&simplex[i]) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= n as f64);

        let second = values[order[n - 1]];
        point(&centroid, &simplex[hi], -REFLECTION, &mut xr);
        bounds.clamp(&mut xr);
        let fr = eval(&xr, evals);

        if fr < f_lo {
            point(&centroid, &xr, EXPANSION, &mut xe);
            bounds.clamp(&mut xe);
            let fe = eval(&xe, evals);
            if fe < fr {
                simplex[hi].clone_from(&xe);
                values[hi] = fe;
            } else {
                simplex[hi].clone_from(&xr);
                values[hi] = fr;
            }
            continue;
        }
        if fr < second {
            simplex[hi].clone_from(&xr);
            values[hi] = fr;
            continue;
        }
        let accepted = if fr < f_hi {
            point(&centroid, &xr, CONTRACTION, &mut xc);
            let fc = eval(&xc, evals);
            (fc <= fr).then_some(fc)
        } else {
            point(&centroid, &simplex[hi], CONTRACTION, &mut xc);
            let fc = eval(&xc, evals);
            (fc < f_hi).then_some(fc)
        };
        if let Some(fc) = accepted {
            simplex[hi].clone_from(&xc);
            values[hi] = fc;
            continue;
        }
        let best = simplex[lo].clone();
        for i in 0..=n {
            if i == lo {
                continue;
            }
            for (v, b) in simplex[i].iter_mut().zip(&best) {
                *v = b + SHRINK * (*v - b);
            }
            values[i] = eval(&simplex[i], evals);
        }
    }

    let lo = order[0];
    Run {
        x: simplex[lo].clone(),
        f: values[lo],
        iterations,
        converged,
    }
}

/// Minimizes `f` from `x0` with `1 + cfg.restarts` Nelder–Mead runs.
///
/// Non-finite objective values count as `+∞`. Restart `r ≥ 1` starts from
/// `x0` plus seeded uniform jitter in `±initial_step`. The best run wins;
/// ties go to the earlier run.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    cfg: &OptimizerConfig,
    bounds: Option<&Bounds>,
) -> Result<NelderMeadResult> {
    cfg.validate()?;
    if x0.is_empty() {
        return Err(invalid("empty parameter vector"));
    }
    let unbounded;
    let bounds = match bounds {
        Some(b) => {
            b.validate(x0.len())?;
            b
        }
        None => {
            unbounded = Bounds::unbounded(x0.len());
            &unbounded
        }
    };
    let mut start = x0.to_vec();
    bounds.clamp(&mut start);

    let mut evaluations = 1;
    let f0 = f(&start);
    if !f0.is_finite() {
        return Err(Error::NonFiniteInitial);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Run> = None;
    for r in 0..=cfg.restarts {
        let run = if r == 0 {
            single_run(&mut f, &start, f0, cfg, bounds, &mut evaluations)
        } else {
            let mut x: Vec<f64> = start
                .iter()
                .map(|v| v + rng.random_range(-cfg.initial_step..=cfg.initial_step))
                .collect();
            bounds.clamp(&mut x);
            evaluations += 1;
            let fx = sanitize(f(&x));
            single_run(&mut f, &x, fx, cfg, bounds, &mut evaluations)
        };
        if best.as_ref().is_none_or(|b| run.f < b.f) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one run");
    Ok(NelderMeadResult {
        x: best.x,
        f: best.f,
        iterations: best.iterations,
        converged: best.converged,
        evaluations,
    })
}

/// Map between positive parameters and their logarithms, with an optional
/// box in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTransform {
    bounds: Bounds,
}

impl ParamTransform {
    pub fn new(n: usize) -> Self {
        Self {
            bounds: Bounds::unbounded(n),
        }
    }

    pub fn with_log_bounds(bounds: Bounds) -> Result<Self> {
        bounds.validate(bounds.lower.len())?;
        Ok(Self { bounds })
    }

    pub fn dim(&self) -> usize {
        self.bounds.lower.len()
    }

    pub fn log_bounds(&self) -> &Bounds {
        &self.bounds
    }

    /// Restricts coordinate `i` to `value ≥ min` (in the positive domain).
    pub fn set_lower(&mut self, i: usize, min: f64) -> Result<()> {
        if !(min > 0.0) {
            return Err(Error::InvalidBounds { axis: i });
        }
        self.bounds.lower[i] = libm::log(min);
        self.bounds.validate(self.dim())
    }

    pub fn set_upper(&mut self, i: usize, max: f64) -> Result<()> {
        if !(max > 0.0) {
            return Err(Error::InvalidBounds { axis: i });
        }
        self.bounds.upper[i] = libm::log(max);
        self.bounds.validate(self.dim())
    }

    pub fn to_log(&self, params: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), params.len())?;
        params
            .iter()
            .map(|&p| {
                if p > 0.0 && p.is_finite() {
                    Ok(libm::log(p))
                } else {
                    Err(invalid("parameters must be positive and finite"))
                }
            })
            .collect()
    }

    pub fn from_log(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| libm::exp(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Fitted positive parameters.
    pub params: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub evaluations: usize,
}

/// Minimizes `objective` over positive parameters by Nelder–Mead in log
/// space, starting from `init`.
pub fn fit_hyperparams<F: FnMut(&[f64]) -> Result<f64>>(
    mut objective: F,
    init: &[f64],
    transform: &ParamTransform,
    cfg: &OptimizerConfig,
) -> Result<FitResult> {
    let z0 = transform.to_log(init)?;
    let mut params = vec![0.0; init.len()];
    let res = nelder_mead(
        |z| {
            for (p, v) in params.iter_mut().zip(z) {
                *p = libm::exp(*v);
            }
            objective(&params).unwrap_or(f64::INFINITY)
        },
        &z0,
        cfg,
        Some(transform.log_bounds()),
    )?;
    Ok(FitResult {
        params: transform.from_log(&res.x),
        value: res.f,
        iterations: res.iterations,
        converged: res.converged,
        evaluations: res.evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense_gp::time_nll_shared;
    use crate::kernels::SeHyperparams;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn quadratic_bowl() {
        let r = nelder_mead(
            |x| (x[0] - 1.0).powi(2) + (x[1] - 2.0).powi(2),
            &[0.0, 0.0],
            &OptimizerConfig::default(),
            None,
        )
        .unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 2.0).abs() < 1e-5);
        assert!(r.converged);
    }

    #[test]
    fn rosenbrock() {
        let cfg = OptimizerConfig {
            restarts: 0,
            ..Default::default()
        };
        let r = nelder_mead(
            |x| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2),
            &[-1.2, 1.0],
            &cfg,
            None,
        )
        .unwrap();
        assert!(r.f < 1e-6, "f = {}", r.f);
        assert!(r.iterations <= 2000);
    }

    #[test]
    fn constant_objective_stops_at_start() {
        let r = nelder_mead(|_| 3.0, &[0.5, -0.5], &OptimizerConfig::default(), None).unwrap();
        assert_eq!(r.x, vec![0.5, -0.5]);
        assert_eq!(r.iterations, 0);
        assert!(r.converged);
    }

    #[test]
    fn non_finite_start() {
        let r = nelder_mead(|_| f64::NAN, &[0.0], &OptimizerConfig::default(), None);
        assert_eq!(r.unwrap_err(), Error::NonFiniteInitial);
    }

    #[test]
    fn non_finite_values_are_avoided() {
        let r = nelder_mead(
            |x| if x[0] < 0.0 { f64::NAN } else { (x[0] - 0.1).powi(2) },
            &[1.0],
            &OptimizerConfig::default(),
            None,
        )
        .unwrap();
        assert!((r.x[0] - 0.1).abs() < 1e-5);
    }

    #[test]
    fn bounds_are_respected() {
        let b = Bounds {
            lower: vec![0.5, f64::NEG_INFINITY],
            upper: vec![f64::INFINITY, f64::INFINITY],
        };
        let r = nelder_mead(|x| x[0] * x[0] + (x[1] - 1.0).powi(2), &[2.0, 0.0], &OptimizerConfig::default(), Some(&b)).unwrap();
        assert!(r.x[0] >= 0.5);
        assert!((r.x[0] - 0.5).abs() < 1e-5);
        assert!((r.x[1] - 1.0).abs() < 1e-5);

        let bad = Bounds {
            lower: vec![1.0],
            upper: vec![0.0],
        };
        assert_eq!(
            nelder_mead(|x| x[0], &[0.5], &OptimizerConfig::default(), Some(&bad)).unwrap_err(),
            Error::InvalidBounds { axis: 0 }
        );
    }

    #[test]
    fn transform_round_trip() {
        let t = ParamTransform::new(3);
        let p = [1e-6, 0.37, 42.0];
        let back = t.from_log(&t.to_log(&p).unwrap());
        for (a, b) in p.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-14 * a);
        }
        assert!(t.to_log(&[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn fit_respects_ratio_bound() {
        // push λ down; the log bound keeps it above 1e3 · σ
        let sigma = 1e-3;
        let mut t = ParamTransform::new(1);
        t.set_lower(0, 1e3 * sigma).unwrap();
        let r = fit_hyperparams(|p| Ok(p[0]), &[5.0], &t, &OptimizerConfig::default()).unwrap();
        assert!(r.params[0] >= 1e3 * sigma * (1.0 - 1e-12));
        assert!(r.params.iter().all(|&p| p > 0.0));
    }

    fn synthetic_gp_data(seed: u64) -> (Vec<f64>, Vec<f64>) {
        let times: Vec<f64> = (0..40).map(|i| i as f64 * 0.05).collect();
        let (lambda, l, sn) = (1.0, 0.3, 0.01);
        let k = DMatrix::from_fn(40, 40, |i, j| {
            let r = (times[i] - times[j]) / l;
            lambda * lambda * (-0.5 * r * r).exp() + if i == j { sn * sn } else { 0.0 }
        });
        let chol = nalgebra::Cholesky::new(k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DVector::from_fn(40, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = chol.l() * z;
        (times, y.iter().copied().collect())
    }

    #[test]
    fn recovers_lengthscale() {
        let (times, ys) = synthetic_gp_data(21);
        let obj = |p: &[f64]| {
            let h = SeHyperparams::new(p[0], vec![p[1]])?;
            time_nll_shared(&times, core::slice::from_ref(&ys), &h, p[2])
        };
        let t = ParamTransform::new(3);
        let r = fit_hyperparams(obj, &[1.0, 1.0, 0.1], &t, &OptimizerConfig::default()).unwrap();
        assert!(r.params[1] > 0.15 && r.params[1] < 0.6, "l = {}", r.params[1]);

        // restarting at the optimum does not make things worse
        let again = fit_hyperparams(obj, &r.params, &t, &OptimizerConfig::default()).unwrap();
        assert!(again.value <= r.value);
    }

    #[test]
    fn deterministic() {
        let f = |x: &[f64]| (x[0] - 0.3).powi(4) + (x[1] + x[0]).powi(2) + (3.0 * x[1]).sin();
        let cfg = OptimizerConfig {
            seed: 7,
            ..Default::default()
        };
        let a = nelder_mead(f, &[1.0, 1.0], &cfg, None).unwrap();
        let b = nelder_mead(f, &[1.0, 1.0], &cfg, None).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn never_worse_than_start(x0 in -3.0f64..3.0, y0 in -3.0f64..3.0, seed in 0u64..100) {
            let f = |x: &[f64]| (x[0] * x[1] - 1.0).powi(2) + (x[0] - 2.0).abs() + (5.0 * x[1]).cos();
            let cfg = OptimizerConfig { seed, max_iters: 200, ..Default::default() };
            let r = nelder_mead(f, &[x0, y0], &cfg, None).unwrap();
            prop_assert!(r.f <= f(&[x0, y0]));
        }
    }
}
