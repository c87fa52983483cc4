//! Small linear-algebra helpers shared by the models and filters.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::standard_normal_vector;

/// Relative asymmetry above which a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// A symmetric positive-definite matrix with its Cholesky factor cached.
///
/// Used for observation noise and any covariance that must be inverted in a
/// hot loop: quadratic forms and inverse applications go through triangular
/// solves instead of explicit inverses.
#[derive(Clone, Debug)]
pub struct Covariance {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Covariance {
    /// Wraps a symmetric positive-definite matrix, rejecting asymmetric or
    /// non-PD input.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&matrix)?;
        let chol = Cholesky::new(matrix.clone())
            .ok_or_else(|| Error::InvalidMatrix("matrix is not positive definite".into()))?;
        Ok(Self { matrix, chol })
    }

    /// Isotropic covariance `variance * I`.
    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        Self::new(DMatrix::from_diagonal_element(dim, dim, variance))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Solves `Sigma x = v`.
    pub fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// Quadratic form `v' Sigma^{-1} v`.
    pub fn quad_form_inv(&self, v: &DVector<f64>) -> f64 {
        // v' Sigma^-1 v = |L^-1 v|^2
        let mut w = v.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut w);
        w.norm_squared()
    }

    /// Lower-triangular square root `L` with `L L' = Sigma`.
    pub fn sqrt_lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Applies the square root: `L v`.
    pub fn sqrt_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.l() * v
    }

    /// Draws a sample from `N(0, Sigma)`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        self.sqrt_apply(&standard_normal_vector(rng, self.dim()))
    }

    /// `log det Sigma`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Rejects matrices whose relative asymmetry exceeds [`SYMMETRY_TOL`].
pub fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidMatrix(format!(
            "expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1e-300);
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst / scale > SYMMETRY_TOL {
        return Err(Error::InvalidMatrix(format!(
            "asymmetry {:.3e} exceeds tolerance (relative to {:.3e})",
            worst, scale
        )));
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted
/// descending; returns `(eigenvalues, eigenvectors)` with eigenvectors in
/// matching column order.
pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = nalgebra::SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sym.eigenvalues[b].total_cmp(&sym.eigenvalues[a]));
    let vals = DVector::from_fn(n, |i, _| sym.eigenvalues[order[i]]);
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &sym.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// Central-difference Jacobian of `f` at `x` with step `1e-6 * (1 + |x_j|)`.
pub fn central_difference_jacobian<F>(f: F, x: &DVector<f64>, out_dim: usize) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(out_dim, n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for j in 0..n {
        let h = 1e-6 * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        let diff = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(j, &diff);
        xp[j] = x[j];
        xm[j] = x[j];
    }
    jac
}

/// Central-difference gradient of a scalar function.
pub fn central_difference_gradient<F>(f: F, x: &DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = x.len();
    let mut grad = DVector::zeros(n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for j in 0..n {
        let h = 1e-6 * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        xm[j] = x[j] - h;
        grad[j] = (f(&xp) - f(&xm)) / (2.0 * h);
        xp[j] = x[j];
        xm[j] = x[j];
    }
    grad
}

/// Normalizes log-domain weights to probabilities summing to one.
///
/// Entries of `-inf` map to zero weight. Errors if every entry is `-inf` or
/// the normalizer is non-finite.
pub fn normalize_log_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::FilterDivergence(
            "all particle weights vanished".into(),
        ));
    }
    let unnorm: Vec<f64> = log_w.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::FilterDivergence(format!(
            "weight normalizer is {total}"
        )));
    }
    Ok(unnorm.into_iter().map(|w| w / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn covariance_quad_form_matches_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = Covariance::new(m.clone()).unwrap();
        let v = DVector::from_column_slice(&[1.0, -2.0]);
        let direct = v.dot(&(m.try_inverse().unwrap() * &v));
        assert_abs_diff_eq!(c.quad_form_inv(&v), direct, epsilon = 1e-12);
    }

    #[test]
    fn covariance_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]);
        assert!(Covariance::new(m).is_err());
    }

    #[test]
    fn covariance_sqrt_reconstructs() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let c = Covariance::new(m.clone()).unwrap();
        let l = c.sqrt_lower();
        let rec = &l * l.transpose();
        assert_abs_diff_eq!((rec - m).amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]);
        let (vals, vecs) = symmetric_eigen_desc(&m);
        assert_abs_diff_eq!(vals[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[2], 1.0, epsilon = 1e-12);
        // reconstruction
        let rec = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert_abs_diff_eq!((rec - m).amax(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn fd_jacobian_of_linear_map_is_exact() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        let x = DVector::from_column_slice(&[0.3, -0.7, 1.1]);
        let jac = central_difference_jacobian(|v| &a * v, &x, 2);
        assert_abs_diff_eq!((jac - a).amax(), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn log_weight_normalization_handles_offsets() {
        // adding a constant to every log weight must not change the result
        let w1 = normalize_log_weights(&[-1.0, -2.0, -3.0]).unwrap();
        let w2 = normalize_log_weights(&[999.0, 998.0, 997.0]).unwrap();
        for (a, b) in w1.iter().zip(&w2) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(w1.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn all_dead_weights_is_divergence() {
        assert!(normalize_log_weights(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).is_err());
    }
}
