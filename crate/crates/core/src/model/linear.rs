//! Linear-Gaussian state-space model, mainly used as a test model whose
//! exact posterior is available from a Kalman recursion.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::Covariance;
use crate::model::{NoiseSpec, StateSpaceModel};

/// `x[n+1] = A x[n] + noise`, `z = H x + obs noise`.
#[derive(Clone, Debug)]
pub struct LinearGaussian {
    a: DMatrix<f64>,
    h: DMatrix<f64>,
    noise: NoiseSpec,
    obs_noise: Covariance,
    steps_per_obs: usize,
}

impl LinearGaussian {
    pub fn new(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        sigma_x: DMatrix<f64>,
        sigma_z: DMatrix<f64>,
        steps_per_obs: usize,
    ) -> Result<Self> {
        let m = a.nrows();
        if a.ncols() != m {
            return Err(Error::DimensionMismatch("transition matrix must be square".into()));
        }
        if h.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "observation matrix has {} columns, state dimension is {m}",
                h.ncols()
            )));
        }
        if sigma_x.nrows() != m {
            return Err(Error::DimensionMismatch("state noise dimension mismatch".into()));
        }
        if sigma_z.nrows() != h.nrows() {
            return Err(Error::DimensionMismatch("observation noise dimension mismatch".into()));
        }
        if steps_per_obs == 0 {
            return Err(Error::Config("steps_per_obs must be at least 1".into()));
        }
        Ok(Self {
            a,
            h,
            noise: NoiseSpec::from_covariance(sigma_x)?,
            obs_noise: Covariance::new(sigma_z)?,
            steps_per_obs,
        })
    }

    pub fn transition_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn observation_matrix(&self) -> &DMatrix<f64> {
        &self.h
    }
}

impl StateSpaceModel for LinearGaussian {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn steps_per_obs(&self) -> usize {
        self.steps_per_obs
    }

    fn drift(&self, x: &DVector<f64>, _step: usize) -> DVector<f64> {
        &self.a * x
    }

    fn drift_jacobian(&self, _x: &DVector<f64>, _step: usize) -> DMatrix<f64> {
        self.a.clone()
    }

    fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x
    }

    fn observation_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.h.clone()
    }

    fn observation_is_affine(&self) -> bool {
        true
    }

    fn obs_noise(&self) -> &Covariance {
        &self.obs_noise
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_model(a: f64) -> LinearGaussian {
        LinearGaussian::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            1,
        )
        .unwrap()
    }

    #[test]
    fn scalar_model_is_valid() {
        let m = scalar_model(1.0);
        assert_eq!(m.state_dim(), 1);
        assert_eq!(m.obs_dim(), 1);
        let x = DVector::from_column_slice(&[2.0]);
        assert_abs_diff_eq!(m.drift(&x, 0)[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_map_sends_everything_to_zero() {
        let m = scalar_model(0.0);
        for v in [-3.0, 0.0, 11.5] {
            assert_eq!(m.drift(&DVector::from_column_slice(&[v]), 4)[0], 0.0);
        }
    }

    #[test]
    fn rotation_with_partial_observation() {
        let th = 0.3f64;
        let a = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let m = LinearGaussian::new(
            a,
            h,
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            2,
        )
        .unwrap();
        assert_eq!(m.obs_dim(), 1);
        assert_eq!(m.steps_per_obs(), 2);
        let x = DVector::from_column_slice(&[1.0, -1.0]);
        assert_abs_diff_eq!(m.observe(&x)[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let bad = LinearGaussian::new(
            DMatrix::identity(2, 2),
            DMatrix::identity(3, 3),
            DMatrix::identity(2, 2),
            DMatrix::identity(3, 3),
            1,
        );
        assert!(bad.is_err());
    }
}
