//! State-space and partial-noise model abstractions.
//!
//! A [`StateSpaceModel`] is the discrete-time system
//!
//! ```text
//! x[n+1] = R(x[n], n) + noise,        noise ~ N(0, Sigma_x)
//! z[l]   = h(x[q(l)]) + obs noise,    q(l) = r * l
//! ```
//!
//! A [`PartialNoiseModel`] is the same system after the state covariance has
//! been diagonalized and split into forced coordinates `x` (spanning the
//! noise range) and unforced coordinates `y` (its null space):
//!
//! ```text
//! x[n+1] = f(x[n], y[n], n) + noise,  noise ~ N(0, diag(sigma))
//! y[n+1] = g(x[n], y[n], n)
//! ```
//!
//! Models are immutable after construction and shareable across concurrent
//! particle evaluations.

mod heat;
mod linear;
mod split;

pub use heat::SemiLinearHeat;
pub use linear::LinearGaussian;
pub use split::SplitModel;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{
    central_difference_jacobian, check_symmetric, symmetric_eigen_desc, Covariance,
};
use crate::rng::standard_normal_vector;

/// Default relative eigenvalue cutoff for covariance truncation.
pub const DEFAULT_EIG_THRESHOLD: f64 = 1e-12;

/// A symmetric positive semi-definite covariance in diagonalized, possibly
/// truncated form: `cov ~= V diag(eigvals) V'` with `V` an m-by-p
/// orthonormal-column matrix and every retained eigenvalue strictly above
/// `threshold * max(eigvals)`.
#[derive(Clone, Debug)]
pub struct NoiseSpec {
    cov: DMatrix<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
    threshold: f64,
}

impl NoiseSpec {
    /// Diagonalizes a symmetric PSD matrix, dropping eigenvalues at or below
    /// `threshold * max(eigvals)`.
    ///
    /// Rejects asymmetric input and matrices with eigenvalues below
    /// `-threshold * max(eigvals)`. An all-zero matrix yields rank 0.
    pub fn diagonalize_covariance(cov: DMatrix<f64>, threshold: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&threshold) {
            return Err(Error::InvalidMatrix(format!(
                "eigenvalue threshold must lie in [0, 1), got {threshold}"
            )));
        }
        check_symmetric(&cov)?;
        let (vals, vecs) = symmetric_eigen_desc(&cov);
        let max = vals.iter().copied().fold(0.0f64, f64::max);
        let floor = -threshold * max;
        if let Some(bad) = vals.iter().find(|&&v| v < floor) {
            return Err(Error::InvalidMatrix(format!(
                "matrix is not positive semi-definite: eigenvalue {bad:.3e}"
            )));
        }
        let rank = vals.iter().filter(|&&v| v > threshold * max).count();
        let eigvals = DVector::from_fn(rank, |i, _| vals[i]);
        let eigvecs = vecs.columns(0, rank).into_owned();
        Ok(Self {
            cov,
            eigvecs,
            eigvals,
            threshold,
        })
    }

    /// Shorthand with the default truncation threshold.
    pub fn from_covariance(cov: DMatrix<f64>) -> Result<Self> {
        Self::diagonalize_covariance(cov, DEFAULT_EIG_THRESHOLD)
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    /// Number of retained eigenpairs.
    pub fn rank(&self) -> usize {
        self.eigvals.len()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank() == self.dim()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Retained eigenvalues, sorted descending.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigvals
    }

    /// Retained eigenvectors (columns match `eigenvalues`).
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Draws `V sqrt(Lambda) xi` with `xi ~ N(0, I_p)`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let xi = standard_normal_vector(rng, self.rank());
        self.sqrt_apply(&xi)
    }

    /// Applies the retained square root: `V sqrt(Lambda) xi`, `xi` of length `rank`.
    pub fn sqrt_apply(&self, xi: &DVector<f64>) -> DVector<f64> {
        let scaled = DVector::from_fn(self.rank(), |i, _| self.eigvals[i].sqrt() * xi[i]);
        &self.eigvecs * scaled
    }

    /// Solves `cov x = v` through the retained eigenpairs; requires full rank.
    pub fn apply_inverse(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.is_full_rank() {
            return Err(Error::SingularStateNoise(format!(
                "rank {} < dimension {}",
                self.rank(),
                self.dim()
            )));
        }
        let proj = self.eigvecs.tr_mul(v);
        let scaled = DVector::from_fn(self.rank(), |i, _| proj[i] / self.eigvals[i]);
        Ok(&self.eigvecs * scaled)
    }

    /// Quadratic form `v' cov^{-1} v`; requires full rank.
    pub fn quad_form_inv(&self, v: &DVector<f64>) -> Result<f64> {
        if !self.is_full_rank() {
            return Err(Error::SingularStateNoise(format!(
                "rank {} < dimension {}",
                self.rank(),
                self.dim()
            )));
        }
        let proj = self.eigvecs.tr_mul(v);
        Ok((0..self.rank()).map(|i| proj[i] * proj[i] / self.eigvals[i]).sum())
    }

    /// `V diag(eigvals) V'`, for reconstruction checks.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.eigvecs * DMatrix::from_diagonal(&self.eigvals) * self.eigvecs.transpose()
    }
}

/// An observation `z` taken at observation index `l`, i.e. model step `r * l`.
#[derive(Clone, Debug)]
pub struct Observation {
    pub values: DVector<f64>,
    pub index: usize,
    pub model_step: usize,
}

impl Observation {
    /// Builds the observation at index `l` for a model with `r` steps per
    /// observation, so that `model_step = r * l`.
    pub fn at(index: usize, steps_per_obs: usize, values: DVector<f64>) -> Self {
        Self {
            values,
            index,
            model_step: index * steps_per_obs,
        }
    }
}

/// Discrete-time stochastic state-space model with additive Gaussian noise.
pub trait StateSpaceModel: Sync {
    /// State dimension `m`.
    fn state_dim(&self) -> usize;

    /// Observation dimension `k`.
    fn obs_dim(&self) -> usize;

    /// Model steps between observations (`r`).
    fn steps_per_obs(&self) -> usize;

    /// Deterministic drift `R(x, n)`.
    fn drift(&self, x: &DVector<f64>, step: usize) -> DVector<f64>;

    /// Jacobian of the drift; central finite differences unless overridden.
    fn drift_jacobian(&self, x: &DVector<f64>, step: usize) -> DMatrix<f64> {
        central_difference_jacobian(|v| self.drift(v, step), x, self.state_dim())
    }

    /// State noise covariance in diagonalized form.
    fn noise(&self) -> &NoiseSpec;

    /// Observation map `h(x)`.
    fn observe(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Jacobian of the observation map; finite differences unless overridden.
    fn observation_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        central_difference_jacobian(|v| self.observe(v), x, self.obs_dim())
    }

    /// Whether `h` is affine in the state; enables closed-form updates.
    fn observation_is_affine(&self) -> bool {
        false
    }

    /// Observation noise covariance.
    fn obs_noise(&self) -> &Covariance;

    /// Advances one model step, sampling the state noise.
    fn advance(&self, x: &DVector<f64>, step: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        self.drift(x, step) + self.noise().sample(rng)
    }
}

/// Jacobians of one partial-noise model step, evaluated at a single point.
#[derive(Clone, Debug)]
pub struct StepJacobians {
    /// d f / d x (p-by-p)
    pub f_x: DMatrix<f64>,
    /// d f / d y (p-by-q)
    pub f_y: DMatrix<f64>,
    /// d g / d x (q-by-p)
    pub g_x: DMatrix<f64>,
    /// d g / d y (q-by-q)
    pub g_y: DMatrix<f64>,
}

/// Model with rank-deficient state noise, written in forced/unforced
/// coordinates. The forced noise covariance is diagonal by construction.
pub trait PartialNoiseModel: Sync {
    /// Forced dimension `p` (rank of the original state covariance).
    fn forced_dim(&self) -> usize;

    /// Unforced dimension `m - p`.
    fn unforced_dim(&self) -> usize;

    fn obs_dim(&self) -> usize;

    fn steps_per_obs(&self) -> usize;

    /// Forced drift `f(x, y, n)`.
    fn forced_drift(&self, x: &DVector<f64>, y: &DVector<f64>, step: usize) -> DVector<f64>;

    /// Unforced update `g(x, y, n)`; deterministic.
    fn unforced_next(&self, x: &DVector<f64>, y: &DVector<f64>, step: usize) -> DVector<f64>;

    /// Diagonal of the forced noise covariance (strictly positive entries).
    fn forced_noise_diag(&self) -> &DVector<f64>;

    /// Observation map `h(x, y)`.
    fn observe(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;

    fn obs_noise(&self) -> &Covariance;

    /// Whether `h` is affine in `(x, y)`.
    fn observation_is_affine(&self) -> bool {
        false
    }

    /// All four coupling Jacobians at `(x, y, n)` in one pass.
    fn step_jacobians(&self, x: &DVector<f64>, y: &DVector<f64>, step: usize) -> StepJacobians {
        let p = self.forced_dim();
        let q = self.unforced_dim();
        let f_x = central_difference_jacobian(|v| self.forced_drift(v, y, step), x, p);
        let f_y = central_difference_jacobian(|v| self.forced_drift(x, v, step), y, p);
        let g_x = central_difference_jacobian(|v| self.unforced_next(v, y, step), x, q);
        let g_y = central_difference_jacobian(|v| self.unforced_next(x, v, step), y, q);
        StepJacobians { f_x, f_y, g_x, g_y }
    }

    /// Observation Jacobians `(dh/dx, dh/dy)`.
    fn obs_jacobians(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let k = self.obs_dim();
        let h_x = central_difference_jacobian(|v| self.observe(v, y), x, k);
        let h_y = central_difference_jacobian(|v| self.observe(x, v), y, k);
        (h_x, h_y)
    }

    /// Advances one model step; forced noise sampled iff `rng` is given.
    fn advance(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        step: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (DVector<f64>, DVector<f64>) {
        let mut xn = self.forced_drift(x, y, step);
        if let Some(rng) = rng {
            let xi = standard_normal_vector(rng, self.forced_dim());
            let sigma = self.forced_noise_diag();
            for i in 0..xn.len() {
                xn[i] += sigma[i].sqrt() * xi[i];
            }
        }
        let yn = self.unforced_next(x, y, step);
        (xn, yn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_keeps_full_rank_at_zero_threshold() {
        let spec = NoiseSpec::diagonalize_covariance(DMatrix::identity(3, 3), 0.0).unwrap();
        assert_eq!(spec.rank(), 3);
        for v in spec.eigenvalues().iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cutoff_drops_small_eigenvalues() {
        let cov = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 1e-4, 0.0]));
        let spec = NoiseSpec::diagonalize_covariance(cov, 1e-3).unwrap();
        assert_eq!(spec.rank(), 1);
        assert_abs_diff_eq!(spec.eigenvalues()[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let spec = NoiseSpec::from_covariance(DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(spec.rank(), 0);
    }

    #[test]
    fn asymmetric_rejected() {
        let mut m = DMatrix::identity(3, 3);
        m[(0, 2)] = 0.5;
        assert!(NoiseSpec::from_covariance(m).is_err());
    }

    #[test]
    fn reconstruction_error_bounded_by_threshold() {
        // random-ish PSD matrix via A A'
        let a = DMatrix::from_fn(5, 5, |i, j| ((i * 3 + j * 7) % 11) as f64 / 11.0 - 0.4);
        let cov = &a * a.transpose();
        let threshold = 1e-2;
        let spec = NoiseSpec::diagonalize_covariance(cov.clone(), threshold).unwrap();
        let err = (spec.reconstruct() - &cov).norm() / cov.norm();
        // spectral-norm bound implies this Frobenius-relative bound up to sqrt(m)
        assert!(err <= threshold * (5.0f64).sqrt());
    }

    #[test]
    fn eigvecs_orthonormal_and_sorted() {
        let a = DMatrix::from_fn(6, 6, |i, j| ((i * 5 + j * 3) % 13) as f64 / 13.0);
        let cov = &a * a.transpose();
        let spec = NoiseSpec::from_covariance(cov).unwrap();
        let g = spec.eigenvectors().tr_mul(spec.eigenvectors());
        assert_abs_diff_eq!(
            (g - DMatrix::identity(spec.rank(), spec.rank())).amax(),
            0.0,
            epsilon = 1e-10
        );
        for w in spec.eigenvalues().as_slice().windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn sample_covariance_converges() {
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.2, 0.0, 0.2, 0.5]);
        let spec = NoiseSpec::from_covariance(cov.clone()).unwrap();
        let mut r = rng::stream(7, &[99]);
        let n = 100_000;
        let mut acc = DMatrix::zeros(3, 3);
        for _ in 0..n {
            let w = spec.sample(&mut r);
            acc += &w * w.transpose();
        }
        acc /= n as f64;
        let rel = (acc - &cov).norm() / cov.norm();
        assert!(rel < 0.1, "relative Frobenius error {rel}");
    }

    #[test]
    fn quad_form_matches_direct_inverse() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]);
        let spec = NoiseSpec::from_covariance(cov.clone()).unwrap();
        let v = DVector::from_column_slice(&[0.7, -1.3]);
        let direct = v.dot(&(cov.try_inverse().unwrap() * &v));
        assert_abs_diff_eq!(spec.quad_form_inv(&v).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn singular_inverse_rejected() {
        let cov = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 0.0]));
        let spec = NoiseSpec::from_covariance(cov).unwrap();
        assert!(spec.quad_form_inv(&DVector::from_column_slice(&[1.0, 1.0])).is_err());
    }
}
