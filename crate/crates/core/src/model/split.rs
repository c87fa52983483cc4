//! Forced/unforced splitting of a state-space model with rank-deficient
//! noise.
//!
//! The orthogonal eigenbasis of the state covariance defines new coordinates
//! in which the noise covariance is diagonal: the leading `p` coordinates
//! (the noise range) are forced, the remaining `m - p` evolve
//! deterministically given the previous full state.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen_desc, Covariance};
use crate::model::{PartialNoiseModel, StateSpaceModel, StepJacobians};

/// A state-space model rewritten in the eigenbasis of its state covariance.
pub struct SplitModel<M: StateSpaceModel> {
    inner: M,
    /// full orthogonal eigenbasis, forced columns first
    basis: DMatrix<f64>,
    forced: usize,
    sigma_diag: DVector<f64>,
}

impl<M: StateSpaceModel> SplitModel<M> {
    /// Splits `model` into forced and unforced coordinates. Errors when the
    /// state covariance has full rank (no unforced subspace; use the
    /// full-noise filter instead).
    pub fn new(model: M) -> Result<Self> {
        let m = model.state_dim();
        let p = model.noise().rank();
        if p >= m {
            return Err(Error::NoUnforcedSubspace);
        }
        let (vals, basis) = symmetric_eigen_desc(model.noise().covariance());
        let sigma_diag = DVector::from_fn(p, |i, _| vals[i]);
        Ok(Self {
            inner: model,
            basis,
            forced: p,
            sigma_diag,
        })
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    /// Transformed-to-original coordinates.
    pub fn to_full(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let m = self.inner.state_dim();
        let mut w = DVector::zeros(m);
        w.rows_mut(0, self.forced).copy_from(x);
        w.rows_mut(self.forced, m - self.forced).copy_from(y);
        &self.basis * w
    }

    /// Original-to-transformed coordinates.
    pub fn from_full(&self, state: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let w = self.basis.tr_mul(state);
        let x = w.rows(0, self.forced).into_owned();
        let y = w.rows(self.forced, w.len() - self.forced).into_owned();
        (x, y)
    }

    fn transformed_drift(&self, x: &DVector<f64>, y: &DVector<f64>, step: usize) -> DVector<f64> {
        self.basis.tr_mul(&self.inner.drift(&self.to_full(x, y), step))
    }
}

impl<M: StateSpaceModel> PartialNoiseModel for SplitModel<M> {
    fn forced_dim(&self) -> usize {
        self.forced
    }

    fn unforced_dim(&self) -> usize {
        self.inner.state_dim() - self.forced
    }

    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    fn steps_per_obs(&self) -> usize {
        self.inner.steps_per_obs()
    }

    fn forced_drift(&self, x: &DVector<f64>, y: &DVector<f64>, step: usize) -> DVector<f64> {
        self.transformed_drift(x, y, step).rows(0, self.forced).into_owned()
    }

    fn unforced_next(&self, x: &DVector<f64>, y: &DVector<f64>, step: usize) -> DVector<f64> {
        let w = self.transformed_drift(x, y, step);
        w.rows(self.forced, w.len() - self.forced).into_owned()
    }

    fn forced_noise_diag(&self) -> &DVector<f64> {
        &self.sigma_diag
    }

    fn observe(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.inner.observe(&self.to_full(x, y))
    }

    fn obs_noise(&self) -> &Covariance {
        self.inner.obs_noise()
    }

    fn observation_is_affine(&self) -> bool {
        self.inner.observation_is_affine()
    }

    fn step_jacobians(&self, x: &DVector<f64>, y: &DVector<f64>, step: usize) -> StepJacobians {
        let p = self.forced;
        let q = self.unforced_dim();
        let full = self.inner.drift_jacobian(&self.to_full(x, y), step);
        let transformed = self.basis.tr_mul(&(&full * &self.basis));
        StepJacobians {
            f_x: transformed.view((0, 0), (p, p)).into_owned(),
            f_y: transformed.view((0, p), (p, q)).into_owned(),
            g_x: transformed.view((p, 0), (q, p)).into_owned(),
            g_y: transformed.view((p, p), (q, q)).into_owned(),
        }
    }

    fn obs_jacobians(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let jac = self.inner.observation_jacobian(&self.to_full(x, y));
        let transformed = &jac * &self.basis;
        let k = jac.nrows();
        (
            transformed.view((0, 0), (k, self.forced)).into_owned(),
            transformed
                .view((0, self.forced), (k, self.unforced_dim()))
                .into_owned(),
        )
    }
}
