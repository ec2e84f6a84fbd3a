//! Dense positive-definite linear algebra shared by every GP computation.
//!
//! All covariance inverses and log-determinants go through
//! [`factorize_psd`], which retries a Cholesky factorization with a growing
//! diagonal jitter when the input is numerically singular.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Maximum number of jitter doublings attempted after the first failure.
pub const MAX_JITTER_ESCALATIONS: u32 = 10;

/// Smallest escalation jitter, relative to the mean diagonal magnitude.
pub const RELATIVE_JITTER_FLOOR: f64 = 1e-12;

/// Cholesky factor `L` of `A + jitter_used * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdFactorization {
    lower: DMatrix<f64>,
    jitter_used: f64,
    log_det: f64,
}

impl PsdFactorization {
    /// Wraps an existing lower-triangular factor. The diagonal must be
    /// strictly positive.
    pub fn from_lower(lower: DMatrix<f64>, jitter_used: f64) -> Result<Self> {
        check_dim(lower.nrows(), lower.ncols())?;
        let mut log_det = 0.0;
        for i in 0..lower.nrows() {
            let d = lower[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    escalations: 0,
                    jitter: jitter_used,
                });
            }
            log_det += libm::log(d);
        }
        Ok(Self {
            lower,
            jitter_used,
            log_det: 2.0 * log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// `log det(A + jitter_used * I)`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `L * L^T`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    /// Solves `(A + jitter I) X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), b.nrows())?;
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        self.lower.tr_solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), b.len())?;
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        self.lower.tr_solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    /// Half solve `L^{-1} B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), b.nrows())?;
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), b.len())?;
        let mut x = b.clone();
        self.lower.solve_lower_triangular_mut(&mut x);
        Ok(x)
    }

    /// Half solve `L^{-T} B`.
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), b.nrows())?;
        let mut x = b.clone();
        self.lower.tr_solve_lower_triangular_mut(&mut x);
        Ok(x)
    }
}

fn mean_abs_diagonal(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        sum += libm::fabs(a[(i, i)]);
    }
    sum / n as f64
}

fn try_cholesky(a: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let mut shifted = a.clone();
    if jitter > 0.0 {
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
    }
    Cholesky::new(shifted).map(|c| c.unpack())
}

/// Cholesky-factorizes the symmetric matrix `a`, adding diagonal jitter when
/// needed.
///
/// The first attempt uses `base_jitter` as given. Each failure moves the
/// jitter to `max(base_jitter, 1e-12 * mean|diag|)` and then doubles it, up
/// to [`MAX_JITTER_ESCALATIONS`] times. Only the lower triangle of `a` is
/// read.
pub fn factorize_psd(a: &DMatrix<f64>, base_jitter: f64) -> Result<PsdFactorization> {
    check_dim(a.nrows(), a.ncols())?;
    if a.nrows() == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: 0,
        });
    }
    let base_jitter = if base_jitter.is_finite() {
        base_jitter.max(0.0)
    } else {
        0.0
    };
    let floor = RELATIVE_JITTER_FLOOR * mean_abs_diagonal(a).max(f64::MIN_POSITIVE);
    let escalation_start = base_jitter.max(floor);

    let mut jitter = base_jitter;
    for escalation in 0..=MAX_JITTER_ESCALATIONS {
        if let Some(lower) = try_cholesky(a, jitter) {
            return PsdFactorization::from_lower(lower, jitter);
        }
        if escalation == MAX_JITTER_ESCALATIONS {
            break;
        }
        jitter = if escalation == 0 {
            if base_jitter > 0.0 {
                2.0 * escalation_start
            } else {
                escalation_start
            }
        } else {
            2.0 * jitter
        };
    }
    Err(Error::NotPositiveDefinite {
        escalations: MAX_JITTER_ESCALATIONS,
        jitter,
    })
}

/// Solves `(A + jitter I) X = B` with a stored factorization.
pub fn solve_psd(f: &PsdFactorization, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    f.solve(b)
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Averages `a` with its transpose in place.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows().min(a.ncols());
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Symmetrizes `a` and replaces negative eigenvalues by zero.
pub fn clamp_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut sym = a.clone();
    symmetrize(&mut sym);
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&clamped) * q.transpose();
    symmetrize(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn frob(a: &DMatrix<f64>) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        // xorshift; test-only, keeps fixtures independent of the rand crate
        let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        DMatrix::from_fn(rows, cols, |_, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
    }

    #[test]
    fn identity_factor_is_identity() {
        let f = factorize_psd(&DMatrix::identity(3, 3), 0.0).unwrap();
        assert_eq!(f.lower(), &DMatrix::<f64>::identity(3, 3));
        assert_eq!(f.log_det(), 0.0);
        assert_eq!(f.jitter_used(), 0.0);
    }

    #[test]
    fn diagonal_factor() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let f = factorize_psd(&a, 0.0).unwrap();
        assert_eq!(f.lower()[(0, 0)], 2.0);
        assert_eq!(f.lower()[(1, 1)], 3.0);
        assert_eq!(f.lower()[(1, 0)], 0.0);
        assert!((f.log_det() - 36f64.ln()).abs() < 1e-15);
        let x = f.solve(&DMatrix::from_column_slice(2, 1, &[4.0, 9.0])).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn rank_one_needs_jitter() {
        let v = DVector::from_vec(vec![1.0, 1.0]);
        let a = &v * v.transpose();
        let f = factorize_psd(&a, 1e-10).unwrap();
        assert!(f.jitter_used() >= 1e-10);
        let target = &a + DMatrix::identity(2, 2) * f.jitter_used();
        let resid = frob(&(f.reconstruct() - &target)) / frob(&a);
        assert!(resid < 1e-8, "residual {resid}");
    }

    #[test]
    fn rank_one_without_base_jitter_escalates() {
        let a = DMatrix::from_element(3, 3, 1.0);
        let f = factorize_psd(&a, 0.0).unwrap();
        assert!(f.jitter_used() > 0.0);
        let target = &a + DMatrix::identity(3, 3) * f.jitter_used();
        assert!(frob(&(f.reconstruct() - target)) / frob(&a) < 1e-8);
    }

    #[test]
    fn indefinite_fails_after_escalation() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match factorize_psd(&a, 0.0) {
            Err(Error::NotPositiveDefinite { escalations, .. }) => {
                assert_eq!(escalations, MAX_JITTER_ESCALATIONS)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_square_is_dimension_mismatch() {
        let a = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(
            factorize_psd(&a, 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
        let f = factorize_psd(&DMatrix::identity(2, 2), 0.0).unwrap();
        assert!(matches!(
            f.solve(&DMatrix::zeros(3, 1)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let f = factorize_psd(&DMatrix::identity(4, 4), 0.0).unwrap();
        let b = seeded_matrix(4, 3, 7);
        assert_eq!(solve_psd(&f, &b).unwrap(), b);
    }

    #[test]
    fn recovers_known_solution() {
        let g = seeded_matrix(5, 5, 42);
        let a = &g * g.transpose() + DMatrix::identity(5, 5) * 0.5;
        let x = seeded_matrix(5, 2, 43);
        let b = &a * &x;
        let f = factorize_psd(&a, 0.0).unwrap();
        assert_eq!(f.jitter_used(), 0.0);
        let got = f.solve(&b).unwrap();
        assert!(frob(&(got - &x)) / frob(&x) < 1e-8);
    }

    #[test]
    fn kron_examples() {
        assert_eq!(
            kron(&DMatrix::identity(2, 2), &DMatrix::identity(3, 3)),
            DMatrix::<f64>::identity(6, 6)
        );
        let b = seeded_matrix(2, 3, 5);
        assert_eq!(kron(&DMatrix::from_element(1, 1, 2.5), &b), &b * 2.5);

        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = DMatrix::from_row_slice(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let k = kron(&a, &b);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(k[(i, j)], a[(i / 2, j / 2)] * b[(i % 2, j % 2)]);
            }
        }
    }

    #[test]
    fn clamp_psd_removes_negative_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        let c = clamp_psd(&a);
        let eig = c.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&v| v >= 0.0));
    }

    proptest! {
        #[test]
        fn factorization_reconstructs(seed in 0u64..10_000, n in 1usize..12) {
            let g = seeded_matrix(n, n, seed);
            let a = &g * g.transpose();
            let f = factorize_psd(&a, 0.0).unwrap();
            let target = &a + DMatrix::identity(n, n) * f.jitter_used();
            let scale = frob(&a).max(1e-300);
            prop_assert!(frob(&(f.reconstruct() - target)) / scale <= 1e-8);
            let diag_sum: f64 = (0..n).map(|i| f.lower()[(i, i)].ln()).sum();
            prop_assert!((f.log_det() - 2.0 * diag_sum).abs() <= 1e-12 * (1.0 + f.log_det().abs()));
        }

        #[test]
        fn solve_inverts_factorized_matrix(seed in 0u64..10_000, n in 1usize..10) {
            let g = seeded_matrix(n, n, seed);
            let a = &g * g.transpose() + DMatrix::identity(n, n);
            let f = factorize_psd(&a, 0.0).unwrap();
            let x = f.solve(&a).unwrap();
            prop_assert!(frob(&(x - DMatrix::identity(n, n))) <= 1e-8 * n as f64);
        }

        #[test]
        fn kron_mixed_product(seed in 0u64..10_000) {
            let a = seeded_matrix(2, 3, seed);
            let b = seeded_matrix(3, 2, seed + 1);
            let c = seeded_matrix(3, 2, seed + 2);
            let d = seeded_matrix(2, 4, seed + 3);
            let lhs = kron(&a, &b) * kron(&c, &d);
            let rhs = kron(&(&a * &c), &(&b * &d));
            prop_assert!(frob(&(lhs - &rhs)) <= 1e-10 * frob(&rhs).max(1.0));
        }

        #[test]
        fn kron_identity_log_det(seed in 0u64..10_000, n in 1usize..6, m in 1usize..4) {
            let g = seeded_matrix(n, n, seed);
            let a = &g * g.transpose() + DMatrix::identity(n, n) * 0.1;
            let fa = factorize_psd(&a, 0.0).unwrap();
            let fk = factorize_psd(&kron(&a, &DMatrix::identity(m, m)), 0.0).unwrap();
            prop_assert!((fk.log_det() - m as f64 * fa.log_det()).abs() <= 1e-8 * (1.0 + fk.log_det().abs()));
        }
    }
}
