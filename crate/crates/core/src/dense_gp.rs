//! Exact scalar GP regression over time, with first and second derivative
//! posteriors of the fitted signal.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::Trajectory;
use crate::error::{check_dim, invalid, Error, Result};
use crate::kernels::{se_time_deriv_unchecked, SeHyperparams};
use crate::numerics::{factorize_psd, PsdFactorization};

/// Posterior variances down to this negative value are rounding noise and
/// are clamped to zero.
pub const VARIANCE_CLAMP: f64 = -1e-10;

/// Zero-mean GP over time fitted to one output component.
#[derive(Debug, Clone)]
pub struct TimeGp {
    times: Vec<f64>,
    targets: DVector<f64>,
    hyper: SeHyperparams,
    noise_std: f64,
    factor: PsdFactorization,
    weights: DVector<f64>,
}

fn check_inputs(times: &[f64], targets: &[f64], hyper: &SeHyperparams, noise_std: f64) -> Result<()> {
    check_dim(times.len(), targets.len())?;
    check_dim(1, hyper.dim())?;
    if times.len() < 2 {
        return Err(invalid("a time GP needs at least two samples"));
    }
    if !(noise_std > 0.0) || !noise_std.is_finite() {
        return Err(invalid("noise std must be positive"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("times must be strictly increasing"));
    }
    if !targets.iter().all(|v| v.is_finite()) {
        return Err(invalid("targets must be finite"));
    }
    Ok(())
}

fn noisy_gram(times: &[f64], hyper: &SeHyperparams, noise_std: f64) -> DMatrix<f64> {
    let n = times.len();
    let s2 = noise_std * noise_std;
    DMatrix::from_fn(n, n, |i, j| {
        let k = se_time_deriv_unchecked(times[i], times[j], hyper, 0, 0);
        if i == j {
            k + s2
        } else {
            k
        }
    })
}

/// `K⁽ᵃ'ᵇ⁾` between the query times and `times`.
fn cross_deriv(queries: &[f64], times: &[f64], hyper: &SeHyperparams, a: u8, b: u8) -> DMatrix<f64> {
    DMatrix::from_fn(queries.len(), times.len(), |i, j| {
        se_time_deriv_unchecked(queries[i], times[j], hyper, a, b)
    })
}

impl TimeGp {
    pub fn fit(times: &[f64], targets: &[f64], hyper: SeHyperparams, noise_std: f64) -> Result<Self> {
        check_inputs(times, targets, &hyper, noise_std)?;
        let factor = factorize_psd(&noisy_gram(times, &hyper, noise_std), 0.0)?;
        let targets = DVector::from_column_slice(targets);
        let weights = factor.solve_vec(&targets)?;
        Ok(Self {
            times: times.to_vec(),
            targets,
            hyper,
            noise_std,
            factor,
            weights,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn hyperparams(&self) -> &SeHyperparams {
        &self.hyper
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// `α = (K + σ_n² I)⁻¹ y`.
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn factorization(&self) -> &PsdFactorization {
        &self.factor
    }

    pub fn posterior_mean(&self, t: f64) -> f64 {
        self.times
            .iter()
            .zip(self.weights.iter())
            .map(|(&s, w)| se_time_deriv_unchecked(t, s, &self.hyper, 0, 0) * w)
            .sum()
    }

    pub fn posterior_var(&self, t: f64) -> f64 {
        let k = DVector::from_iterator(
            self.times.len(),
            self.times.iter().map(|&s| se_time_deriv_unchecked(t, s, &self.hyper, 0, 0)),
        );
        let v = self
            .factor
            .solve_lower_vec(&k)
            .expect("dimension fixed at fit time");
        (self.hyper.variance() - v.norm_squared()).max(0.0)
    }

    /// Posterior mean and covariance of the `order`-th time derivative at
    /// `queries`.
    pub fn derivative_posterior(&self, order: u8, queries: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if order > 2 {
            return Err(Error::UnsupportedOrder(order));
        }
        let kd = cross_deriv(queries, &self.times, &self.hyper, order, 0);
        let mean = &kd * &self.weights;
        let prior = DMatrix::from_fn(queries.len(), queries.len(), |i, j| {
            se_time_deriv_unchecked(queries[i], queries[j], &self.hyper, order, order)
        });
        let v = self.factor.solve_lower(&kd.transpose())?;
        let mut cov = prior - v.transpose() * v;
        crate::numerics::symmetrize(&mut cov);
        for i in 0..queries.len() {
            if cov[(i, i)] < 0.0 {
                cov[(i, i)] = 0.0;
            }
        }
        Ok((mean, cov))
    }

    /// Posterior mean of the `order`-th derivative at `queries`.
    pub fn derivative_mean(&self, order: u8, queries: &[f64]) -> Result<DVector<f64>> {
        if order > 2 {
            return Err(Error::UnsupportedOrder(order));
        }
        Ok(cross_deriv(queries, &self.times, &self.hyper, order, 0) * &self.weights)
    }
}

/// Fits a time GP to component `dim` of `traj`.
pub fn fit_time_gp(traj: &Trajectory, dim: usize, hyper: SeHyperparams, noise_std: f64) -> Result<TimeGp> {
    if dim >= traj.dim() {
        return Err(Error::DimensionMismatch {
            expected: traj.dim(),
            found: dim,
        });
    }
    TimeGp::fit(traj.times(), &traj.component(dim), hyper, noise_std)
}

/// `yᵀ(K + σ_n² I)⁻¹y + log det(K + σ_n² I)` for component `dim`.
pub fn time_nll(traj: &Trajectory, dim: usize, hyper: &SeHyperparams, noise_std: f64) -> Result<f64> {
    if dim >= traj.dim() {
        return Err(Error::DimensionMismatch {
            expected: traj.dim(),
            found: dim,
        });
    }
    time_nll_shared(traj.times(), &[traj.component(dim)], hyper, noise_std)
}

/// Sum of the time NLL over several target columns sharing one set of
/// hyperparameters; factorizes the Gram matrix once.
pub fn time_nll_shared(times: &[f64], columns: &[Vec<f64>], hyper: &SeHyperparams, noise_std: f64) -> Result<f64> {
    if columns.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for c in columns {
        check_inputs(times, c, hyper, noise_std)?;
    }
    let factor = factorize_psd(&noisy_gram(times, hyper, noise_std), 0.0)?;
    let mut total = 0.0;
    for c in columns {
        let v = factor.solve_lower_vec(&DVector::from_column_slice(c))?;
        total += v.norm_squared() + factor.log_det();
    }
    Ok(total)
}
