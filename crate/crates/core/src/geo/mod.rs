//! A one-dimensional magnetohydrodynamic test problem: coupled velocity
//! and magnetic-field equations on [-1, 1],
//!
//! ```text
//! du/dt + u du/dx = b db/dx + nu d2u/dx2 + g_u dW
//! db/dt + u db/dx = b du/dx +    d2b/dx2 + g_b dW
//! ```
//!
//! with `u(+-1) = 0`, `b(+-1) = +-1`, discretized with Legendre spectral
//! elements of order `N` (interior unknowns at the N-1 interior GLL nodes)
//! and a first-order implicit-explicit step: diffusion implicit, advection
//! explicit. The noise is smooth in space, built from a small number of
//! sine and cosine modes, so its covariance is singular once `N` is large
//! enough; the filterable form of the model lives in [`partial`].

pub mod gll;
mod partial;

pub use partial::GeoPartialModel;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Covariance;
use crate::rng::standard_normal_vector;

/// Problem parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeoConfig {
    /// Spectral-element polynomial order `N`.
    pub order: usize,
    /// Time step.
    pub delta: f64,
    /// Viscosity of the velocity equation.
    pub nu: f64,
    /// Noise amplitude of the velocity equation.
    pub g_u: f64,
    /// Noise amplitude of the magnetic equation.
    pub g_b: f64,
    /// Number of sine (and cosine) noise modes.
    pub cutoff: usize,
    /// Number of observation locations.
    pub obs_count: usize,
    /// Observation interval (equally spaced locations).
    pub obs_interval: (f64, f64),
    /// Observation noise standard deviation `s`.
    pub obs_noise: f64,
}

impl Default for GeoConfig {
    fn default() -> Self {
        // desk-scale defaults; the full-scale runs use order 300
        Self {
            order: 100,
            delta: 0.002,
            nu: 1e-3,
            g_u: 0.01,
            g_b: 1.0,
            cutoff: 10,
            obs_count: 200,
            obs_interval: (0.0, 1.0),
            obs_noise: 1e-3,
        }
    }
}

/// Per-step noise-mode increments: standard normal draws for the sine and
/// cosine families of both fields. Resolution-independent, so the same
/// draws define the same Brownian path on every grid.
#[derive(Clone, Debug)]
pub struct ModeDraw {
    pub u_sin: DVector<f64>,
    pub u_cos: DVector<f64>,
    pub b_sin: DVector<f64>,
    pub b_cos: DVector<f64>,
}

impl ModeDraw {
    pub fn sample(cutoff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            u_sin: standard_normal_vector(rng, cutoff),
            u_cos: standard_normal_vector(rng, cutoff),
            b_sin: standard_normal_vector(rng, cutoff),
            b_cos: standard_normal_vector(rng, cutoff),
        }
    }

    pub fn zero(cutoff: usize) -> Self {
        Self {
            u_sin: DVector::zeros(cutoff),
            u_cos: DVector::zeros(cutoff),
            b_sin: DVector::zeros(cutoff),
            b_cos: DVector::zeros(cutoff),
        }
    }

    /// Accumulates fine-step draws into one coarse-step draw: the sum of
    /// `k` unit-variance increments has variance `k`, so dividing by
    /// `sqrt(k)` keeps the entries standard normal for the coarse step.
    pub fn accumulate(draws: &[ModeDraw]) -> Self {
        let cutoff = draws[0].u_sin.len();
        let mut out = ModeDraw::zero(cutoff);
        for d in draws {
            out.u_sin += &d.u_sin;
            out.u_cos += &d.u_cos;
            out.b_sin += &d.b_sin;
            out.b_cos += &d.b_cos;
        }
        let scale = 1.0 / (draws.len() as f64).sqrt();
        out.u_sin *= scale;
        out.u_cos *= scale;
        out.b_sin *= scale;
        out.b_cos *= scale;
        out
    }
}

/// The discretized test problem: spectral operators, prefactored implicit
/// solves, noise covariances, and the observation interpolant.
pub struct GeoModel {
    cfg: GeoConfig,
    nodes: DVector<f64>,
    quad_w: DVector<f64>,
    /// Interior dimension per field: `N - 1`.
    m: usize,
    /// Interior first-derivative block.
    pub(crate) d_int: DMatrix<f64>,
    /// Interior quadrature weights (the diagonal mass matrix).
    pub(crate) mass: DVector<f64>,
    /// Boundary contribution of `db/dx` at the interior nodes.
    pub(crate) bnd_dx: DVector<f64>,
    /// Boundary contribution of `d2b/dx2` at the interior nodes.
    bnd_dxx: DVector<f64>,
    /// Symmetric implicit operators `M - delta nu M D2` and `M - delta M D2`.
    lhs_u: DMatrix<f64>,
    lhs_b: DMatrix<f64>,
    chol_u: Cholesky<f64, Dyn>,
    chol_b: Cholesky<f64, Dyn>,
    /// Sine/cosine noise-mode matrices at the interior nodes.
    f_sin: DMatrix<f64>,
    f_cos: DMatrix<f64>,
    sigma_u: DMatrix<f64>,
    sigma_b: DMatrix<f64>,
    /// Observation interpolant: interior part, boundary offset, noise.
    h_int: DMatrix<f64>,
    h_offset: DVector<f64>,
    obs_noise: Covariance,
}

impl GeoModel {
    pub fn new(cfg: GeoConfig) -> Result<Self> {
        if cfg.order < 4 {
            return Err(Error::Config("spectral order must be at least 4".into()));
        }
        if cfg.delta <= 0.0 || cfg.obs_noise <= 0.0 {
            return Err(Error::Config("delta and obs_noise must be positive".into()));
        }
        let n = cfg.order;
        let m = n - 1;
        let (nodes, quad_w) = gll::nodes_and_weights(n)?;
        let d_full = gll::differentiation_matrix(&nodes);
        let d2_full = &d_full * &d_full;

        let d_int = d_full.view((1, 1), (m, m)).into_owned();
        let d2_int = d2_full.view((1, 1), (m, m)).into_owned();
        let mass = DVector::from_fn(m, |i, _| quad_w[i + 1]);

        // boundary basis contributions of the magnetic field (-1 at x=-1, +1 at x=+1)
        let bnd_dx = DVector::from_fn(m, |i, _| d_full[(i + 1, n)] - d_full[(i + 1, 0)]);
        let bnd_dxx = DVector::from_fn(m, |i, _| d2_full[(i + 1, n)] - d2_full[(i + 1, 0)]);

        // M - delta nu M D2, symmetrized against roundoff
        let build_lhs = |diffusivity: f64| -> DMatrix<f64> {
            let mut a = DMatrix::from_diagonal(&mass);
            for i in 0..m {
                for j in 0..m {
                    a[(i, j)] -= cfg.delta * diffusivity * mass[i] * d2_int[(i, j)];
                }
            }
            let at = a.transpose();
            (a + at) * 0.5
        };
        let lhs_u = build_lhs(cfg.nu);
        let lhs_b = build_lhs(1.0);
        let chol_u = Cholesky::new(lhs_u.clone())
            .ok_or_else(|| Error::LinAlg("velocity implicit operator not positive definite".into()))?;
        let chol_b = Cholesky::new(lhs_b.clone())
            .ok_or_else(|| Error::LinAlg("magnetic implicit operator not positive definite".into()))?;

        // noise modes sin(k pi x) and cos(k pi x / 2), k = 1..cutoff
        let pi = std::f64::consts::PI;
        let f_sin = DMatrix::from_fn(m, cfg.cutoff, |i, k| ((k + 1) as f64 * pi * nodes[i + 1]).sin());
        let f_cos =
            DMatrix::from_fn(m, cfg.cutoff, |i, k| ((k + 1) as f64 * pi * nodes[i + 1] / 2.0).cos());

        // Sigma = g^2 delta M (Fs Fs' + Fc Fc') M'
        let mode_gram = &f_sin * f_sin.transpose() + &f_cos * f_cos.transpose();
        let base = DMatrix::from_fn(m, m, |i, j| {
            cfg.delta * mass[i] * mode_gram[(i, j)] * mass[j]
        });
        let sigma_u = &base * (cfg.g_u * cfg.g_u);
        let sigma_b = &base * (cfg.g_b * cfg.g_b);

        // observation interpolant at equally spaced points
        let h_full = observation_matrix(&nodes, &quad_w, cfg.obs_count, cfg.obs_interval);
        let h_int = h_full.view((0, 1), (cfg.obs_count, m)).into_owned();
        let h_offset = DVector::from_fn(cfg.obs_count, |i, _| h_full[(i, n)] - h_full[(i, 0)]);
        let obs_noise = Covariance::isotropic(cfg.obs_count, cfg.obs_noise * cfg.obs_noise)?;

        Ok(Self {
            cfg,
            nodes,
            quad_w,
            m,
            d_int,
            mass,
            bnd_dx,
            bnd_dxx,
            lhs_u,
            lhs_b,
            chol_u,
            chol_b,
            f_sin,
            f_cos,
            sigma_u,
            sigma_b,
            h_int,
            h_offset,
            obs_noise,
        })
    }

    pub fn config(&self) -> &GeoConfig {
        &self.cfg
    }

    /// Interior dimension per field (`N - 1`).
    pub fn interior_dim(&self) -> usize {
        self.m
    }

    pub fn nodes(&self) -> &DVector<f64> {
        &self.nodes
    }

    pub fn quad_weights(&self) -> &DVector<f64> {
        &self.quad_w
    }

    pub fn sigma_u(&self) -> &DMatrix<f64> {
        &self.sigma_u
    }

    pub fn sigma_b(&self) -> &DMatrix<f64> {
        &self.sigma_b
    }

    pub fn lhs_u(&self) -> &DMatrix<f64> {
        &self.lhs_u
    }

    pub fn lhs_b(&self) -> &DMatrix<f64> {
        &self.lhs_b
    }

    pub fn obs_noise(&self) -> &Covariance {
        &self.obs_noise
    }

    pub fn obs_interior(&self) -> &DMatrix<f64> {
        &self.h_int
    }

    pub fn obs_offset(&self) -> &DVector<f64> {
        &self.h_offset
    }

    /// Interior samples of the mean initial state
    /// `u = sin(pi x) + 2/5 sin(5 pi x)`, `b = cos(pi x) + 2 sin(pi (x+1)/4)`.
    pub fn initial_mean(&self) -> (DVector<f64>, DVector<f64>) {
        let pi = std::f64::consts::PI;
        let u = DVector::from_fn(self.m, |i, _| {
            let x = self.nodes[i + 1];
            (pi * x).sin() + 0.4 * (5.0 * pi * x).sin()
        });
        let b = DVector::from_fn(self.m, |i, _| {
            let x = self.nodes[i + 1];
            (pi * x).cos() + 2.0 * (pi * (x + 1.0) / 4.0).sin()
        });
        (u, b)
    }

    /// Initial state, optionally perturbed by a Gaussian draw with
    /// covariance `Sigma_u`, `Sigma_b`.
    pub fn initial_state(
        &self,
        randomize: bool,
        rng: &mut ChaCha8Rng,
    ) -> (DVector<f64>, DVector<f64>) {
        let (mut u, mut b) = self.initial_mean();
        if randomize {
            let draw = ModeDraw::sample(self.cfg.cutoff, rng);
            u += self.noise_from_modes(self.cfg.g_u, &draw.u_sin, &draw.u_cos);
            b += self.noise_from_modes(self.cfg.g_b, &draw.b_sin, &draw.b_cos);
        }
        (u, b)
    }

    /// Maps standard normal mode increments onto the additive forcing
    /// `g sqrt(delta) M (Fs z_s + Fc z_c)`, whose covariance is the field's
    /// noise covariance.
    pub fn noise_from_modes(
        &self,
        amplitude: f64,
        z_sin: &DVector<f64>,
        z_cos: &DVector<f64>,
    ) -> DVector<f64> {
        let modes = &self.f_sin * z_sin + &self.f_cos * z_cos;
        let scale = amplitude * self.cfg.delta.sqrt();
        DVector::from_fn(self.m, |i, _| scale * self.mass[i] * modes[i])
    }

    /// The two field forcings of one step from a mode draw.
    pub fn forcing_from_draw(&self, draw: &ModeDraw) -> (DVector<f64>, DVector<f64>) {
        (
            self.noise_from_modes(self.cfg.g_u, &draw.u_sin, &draw.u_cos),
            self.noise_from_modes(self.cfg.g_b, &draw.b_sin, &draw.b_cos),
        )
    }

    /// Explicit (advection and boundary) part of the right-hand sides,
    /// before the mass scaling.
    pub(crate) fn explicit_rhs(
        &self,
        u: &DVector<f64>,
        b: &DVector<f64>,
        advect: bool,
        boundary: bool,
    ) -> (DVector<f64>, DVector<f64>) {
        let mut rhs_u = u.clone();
        let mut rhs_b = b.clone();
        if advect {
            let du = &self.d_int * u;
            let mut db = &self.d_int * b;
            if boundary {
                db += &self.bnd_dx;
            }
            rhs_u += self.cfg.delta * (b.component_mul(&db) - u.component_mul(&du));
            rhs_b += self.cfg.delta * (b.component_mul(&du) - u.component_mul(&db));
        }
        if boundary {
            rhs_b += self.cfg.delta * &self.bnd_dxx;
        }
        (rhs_u, rhs_b)
    }

    fn step_core(
        &self,
        u: &DVector<f64>,
        b: &DVector<f64>,
        force_u: &DVector<f64>,
        force_b: &DVector<f64>,
        advect: bool,
        boundary: bool,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let (rhs_u, rhs_b) = self.explicit_rhs(u, b, advect, boundary);
        let mut lin_u = DVector::from_fn(self.m, |i, _| self.mass[i] * rhs_u[i]);
        let mut lin_b = DVector::from_fn(self.m, |i, _| self.mass[i] * rhs_b[i]);
        lin_u += force_u;
        lin_b += force_b;
        let u_next = self.chol_u.solve(&lin_u);
        let b_next = self.chol_b.solve(&lin_b);
        if !u_next.iter().all(|v| v.is_finite()) || !b_next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("field blow-up in the implicit-explicit step".into()));
        }
        Ok((u_next, b_next))
    }

    /// One implicit-explicit step with the given additive forcings (use
    /// [`GeoModel::forcing_from_draw`] for noise, zero vectors for none).
    pub fn step(
        &self,
        u: &DVector<f64>,
        b: &DVector<f64>,
        force_u: &DVector<f64>,
        force_b: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.step_core(u, b, force_u, force_b, true, true)
    }

    /// Observes the magnetic field at the configured locations.
    pub fn observe_b(&self, b: &DVector<f64>) -> DVector<f64> {
        &self.h_int * b + &self.h_offset
    }

    /// Full nodal field including the boundary values.
    pub fn with_boundary(&self, interior: &DVector<f64>, left: f64, right: f64) -> DVector<f64> {
        let n = self.cfg.order;
        let mut full = DVector::zeros(n + 1);
        full[0] = left;
        full[n] = right;
        full.rows_mut(1, self.m).copy_from(interior);
        full
    }
}

/// Interpolation matrix from all `N + 1` nodal values to `k` equally spaced
/// points in `interval`; each row sums to one.
pub fn observation_matrix(
    nodes: &DVector<f64>,
    quad_weights: &DVector<f64>,
    k: usize,
    interval: (f64, f64),
) -> DMatrix<f64> {
    let (lo, hi) = interval;
    let points: Vec<f64> = if k == 1 {
        vec![0.5 * (lo + hi)]
    } else {
        (0..k)
            .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
            .collect()
    };
    gll::interpolation_matrix(nodes, quad_weights, &points)
}
