//! Semi-linear heat equation on [0, 1] with homogeneous Dirichlet
//! conditions, driven by spatially smooth noise.
//!
//! The PDE is projected onto the first `m` Laplacian eigenfunctions
//! `sqrt(2) sin(k pi x)` and stepped with forward Euler, giving
//!
//! ```text
//! R(v) = v + dt * (-diag((k pi)^2) v + gamma(v))
//! G    = sqrt(dt) * (1/sqrt(2)) * diag(e^-1, ..., e^-c, 0, ..., 0)
//! ```
//!
//! where `gamma` is the Galerkin projection of the reaction term. The state
//! covariance `G G'` is singular exactly when `c < m`, which makes this the
//! standard small test case for partial-noise filtering.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::Covariance;
use crate::model::{NoiseSpec, StateSpaceModel};

/// Reaction term: value and derivative, both pointwise in the field value.
pub type Reaction = (fn(f64) -> f64, fn(f64) -> f64);

/// Galerkin-truncated stochastic semi-linear heat equation.
pub struct SemiLinearHeat {
    m: usize,
    c: usize,
    dt: f64,
    reaction: Option<Reaction>,
    /// -(k pi)^2, k = 1..m
    laplace_eigs: DVector<f64>,
    /// basis values at quadrature points, n_q-by-m
    basis: DMatrix<f64>,
    quad_w: DVector<f64>,
    noise: NoiseSpec,
    obs_noise: Covariance,
    steps_per_obs: usize,
}

impl SemiLinearHeat {
    /// Builds the heat model with `m` retained modes, `c` forced modes,
    /// reaction term `reaction` (None for the linear equation) and time step
    /// `dt`. Observations default to the identity map with unit noise and
    /// one step per observation; see the `with_*` methods.
    pub fn new(m: usize, c: usize, reaction: Option<Reaction>, dt: f64) -> Result<Self> {
        if m == 0 || c == 0 {
            return Err(Error::Config("m and c must be at least 1".into()));
        }
        if dt <= 0.0 {
            return Err(Error::Config("dt must be positive".into()));
        }
        let laplace_eigs =
            DVector::from_fn(m, |k, _| -((k + 1) as f64 * std::f64::consts::PI).powi(2));

        // trapezoid quadrature on [0,1]; the integrand vanishes at the ends
        let n_q = 8 * m + 1;
        let dx = 1.0 / (n_q - 1) as f64;
        let quad_w = DVector::from_fn(n_q, |q, _| {
            if q == 0 || q == n_q - 1 {
                0.5 * dx
            } else {
                dx
            }
        });
        let basis = DMatrix::from_fn(n_q, m, |q, j| {
            let x = q as f64 * dx;
            (2.0f64).sqrt() * ((j + 1) as f64 * std::f64::consts::PI * x).sin()
        });

        // G = sqrt(dt)/sqrt(2) * diag(e^-1, ..., e^-c, 0, ...); c > m keeps
        // every entry positive (full-rank but ill-conditioned).
        let g_diag = DVector::from_fn(m, |k, _| {
            if k < c {
                (dt / 2.0).sqrt() * (-((k + 1) as f64)).exp()
            } else {
                0.0
            }
        });
        let cov = DMatrix::from_diagonal(&g_diag.map(|v| v * v));
        let noise = NoiseSpec::from_covariance(cov)?;

        Ok(Self {
            m,
            c,
            dt,
            reaction,
            laplace_eigs,
            basis,
            quad_w,
            noise,
            obs_noise: Covariance::isotropic(m, 1.0)?,
            steps_per_obs: 1,
        })
    }

    pub fn with_obs_noise(mut self, sigma_z: DMatrix<f64>) -> Result<Self> {
        self.obs_noise = Covariance::new(sigma_z)?;
        Ok(self)
    }

    pub fn with_steps_per_obs(mut self, r: usize) -> Result<Self> {
        if r == 0 {
            return Err(Error::Config("steps_per_obs must be at least 1".into()));
        }
        self.steps_per_obs = r;
        Ok(self)
    }

    /// True when `c >= m`: the covariance is full rank but the smallest
    /// retained eigenvalue sits at `e^{-2m}` of the largest.
    pub fn is_ill_conditioned(&self) -> bool {
        self.c >= self.m
    }

    pub fn forced_modes(&self) -> usize {
        self.c
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Galerkin coefficients of the reaction term at state `v`.
    fn reaction_projection(&self, v: &DVector<f64>) -> DVector<f64> {
        match self.reaction {
            None => DVector::zeros(self.m),
            Some((value, _)) => {
                let field = &self.basis * v;
                let weighted = DVector::from_fn(field.len(), |q, _| {
                    self.quad_w[q] * value(field[q])
                });
                self.basis.tr_mul(&weighted)
            }
        }
    }
}

impl StateSpaceModel for SemiLinearHeat {
    fn state_dim(&self) -> usize {
        self.m
    }

    fn obs_dim(&self) -> usize {
        self.obs_noise.dim()
    }

    fn steps_per_obs(&self) -> usize {
        self.steps_per_obs
    }

    fn drift(&self, x: &DVector<f64>, _step: usize) -> DVector<f64> {
        let mut f = x.component_mul(&self.laplace_eigs);
        f += self.reaction_projection(x);
        x + self.dt * f
    }

    fn drift_jacobian(&self, x: &DVector<f64>, _step: usize) -> DMatrix<f64> {
        let mut jac = DMatrix::from_diagonal(
            &DVector::from_fn(self.m, |k, _| 1.0 + self.dt * self.laplace_eigs[k]),
        );
        if let Some((_, derivative)) = self.reaction {
            let field = &self.basis * x;
            let scale = DVector::from_fn(field.len(), |q, _| {
                self.quad_w[q] * derivative(field[q])
            });
            let mut scaled = self.basis.clone();
            for (mut row, s) in scaled.row_iter_mut().zip(scale.iter()) {
                row *= *s;
            }
            jac += self.dt * self.basis.tr_mul(&scaled);
        }
        jac
    }

    fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn observation_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.m, self.m)
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
    use crate::linalg::central_difference_jacobian;
    use approx::assert_abs_diff_eq;

    #[test]
    fn noise_square_root_matches_construction() {
        // m=4, c=2, dt=0.01: sqrt(Sigma) = sqrt(0.01) * (1/sqrt(2)) * diag(e^-1, e^-2, 0, 0)
        let model = SemiLinearHeat::new(4, 2, None, 0.01).unwrap();
        let spec = model.noise();
        assert_eq!(spec.rank(), 2);
        let expected = [
            (0.01f64 / 2.0).sqrt() * (-1.0f64).exp(),
            (0.01f64 / 2.0).sqrt() * (-2.0f64).exp(),
        ];
        for (i, e) in expected.iter().enumerate() {
            assert_abs_diff_eq!(spec.eigenvalues()[i].sqrt(), *e, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_state_stays_at_zero_without_reaction() {
        let model = SemiLinearHeat::new(5, 3, None, 0.01).unwrap();
        let zero = DVector::zeros(5);
        assert_abs_diff_eq!(model.drift(&zero, 0).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn full_rank_when_all_modes_forced() {
        let model = SemiLinearHeat::new(6, 6, None, 1e-4).unwrap();
        assert_eq!(model.noise().rank(), 6);
        assert!(model.is_ill_conditioned());
    }

    #[test]
    fn rank_counts_forced_modes() {
        let model = SemiLinearHeat::new(20, 5, None, 1e-4).unwrap();
        assert_eq!(model.noise().rank(), 5);
        assert!(!model.is_ill_conditioned());
    }

    fn cubic(u: f64) -> f64 {
        u - u * u * u
    }

    fn cubic_d(u: f64) -> f64 {
        1.0 - 3.0 * u * u
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let model = SemiLinearHeat::new(6, 3, Some((cubic, cubic_d)), 1e-3).unwrap();
        let x = DVector::from_fn(6, |i, _| 0.3 * ((i + 1) as f64 * 0.7).sin());
        let jac = model.drift_jacobian(&x, 0);
        let fd = central_difference_jacobian(|v| model.drift(v, 0), &x, 6);
        let rel = (jac.clone() - fd).amax() / jac.amax();
        assert!(rel < 1e-5, "relative Jacobian error {rel}");
    }

    #[test]
    fn linear_decay_of_single_mode() {
        // without reaction, mode k decays by factor (1 - dt (k pi)^2)
        let dt = 1e-4;
        let model = SemiLinearHeat::new(3, 3, None, dt).unwrap();
        let mut x = DVector::zeros(3);
        x[1] = 1.0;
        let stepped = model.drift(&x, 0);
        let factor = 1.0 - dt * (2.0 * std::f64::consts::PI).powi(2);
        assert_abs_diff_eq!(stepped[1], factor, epsilon = 1e-12);
        assert_abs_diff_eq!(stepped[0], 0.0, epsilon = 1e-12);
    }
}
