//! The simplified implicit filter: particles run freely between
//! observations and implicit sampling happens only at observation times,
//! reducing the sampled dimension from `r * m` to `m`.
//!
//! With an affine observation map the minimum is available in closed form
//! and sampling needs no iteration at all: with `K = H Sigma_x H' + Sigma_z`,
//!
//! ```text
//! phi   = 1/2 (z - H R)' K^{-1} (z - H R)
//! Sigma = (Sigma_x^{-1} + H' Sigma_z^{-1} H)^{-1}
//! mu    = Sigma (Sigma_x^{-1} R + H' Sigma_z^{-1} z)
//! ```
//!
//! and `X = mu + L xi` with `L` the lower Cholesky factor of `Sigma` solves
//! the map equation exactly, with weights `w ~ w_prev exp(-phi) |det L|`.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::filter::{
    finalize_step, log_map_weight, minimize_gradient_descent, sample_random_map, DiagRow,
    FilterOptions, MapScale, StepReport,
};
use crate::linalg::Covariance;
use crate::model::{Observation, PartialNoiseModel, StateSpaceModel};
use crate::rng;

/// Closed-form implicit update for an affine observation map.
#[derive(Clone, Debug)]
pub struct ClosedFormUpdate {
    pub phi: f64,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Lower-triangular square root of `sigma`.
    pub sqrt_lower: DMatrix<f64>,
}

impl ClosedFormUpdate {
    /// `log |det L|` of the Cholesky factor.
    pub fn log_det_sqrt(&self) -> f64 {
        self.sqrt_lower.diagonal().iter().map(|d| d.ln()).sum()
    }

    /// Maps a standard normal draw onto the posterior sample `mu + L xi`.
    pub fn sample(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.mu + &self.sqrt_lower * xi
    }
}

/// Cost of the final step only: one transition term from `traj_end` plus the
/// observation misfit, in the state dimension `m`.
pub fn final_step_cost<M: StateSpaceModel + ?Sized>(
    model: &M,
    traj_end: &DVector<f64>,
    obs: &Observation,
    x_final: &DVector<f64>,
) -> Result<f64> {
    let prediction = model.drift(traj_end, obs.model_step - 1);
    let resid = x_final - prediction;
    let mut cost = 0.5 * model.noise().quad_form_inv(&resid)?;
    let obs_resid = model.observe(x_final) - &obs.values;
    cost += 0.5 * model.obs_noise().quad_form_inv(&obs_resid);
    Ok(cost)
}

/// Gradient of [`final_step_cost`].
pub fn final_step_cost_gradient<M: StateSpaceModel + ?Sized>(
    model: &M,
    traj_end: &DVector<f64>,
    obs: &Observation,
    x_final: &DVector<f64>,
) -> Result<DVector<f64>> {
    let prediction = model.drift(traj_end, obs.model_step - 1);
    let resid = x_final - prediction;
    let mut grad = model.noise().apply_inverse(&resid)?;
    let obs_resid = model.observe(x_final) - &obs.values;
    grad += model
        .observation_jacobian(x_final)
        .tr_mul(&model.obs_noise().apply_inverse(&obs_resid));
    Ok(grad)
}

fn closed_form_parts(
    prediction: &DVector<f64>,
    h: &DMatrix<f64>,
    z_eff: &DVector<f64>,
    sigma_x_inv: &DMatrix<f64>,
    sigma_x: &DMatrix<f64>,
    obs_noise: &Covariance,
) -> Result<ClosedFormUpdate> {
    // innovation covariance K = H Sigma_x H' + Sigma_z
    let k_mat = h * sigma_x * h.transpose() + obs_noise.matrix();
    let k_cov = Covariance::new(k_mat)
        .map_err(|_| Error::LinAlg("combined covariance K is singular".into()))?;
    let innovation = z_eff - h * prediction;
    let phi = 0.5 * k_cov.quad_form_inv(&innovation);

    // Sigma^{-1} = Sigma_x^{-1} + H' Sigma_z^{-1} H
    let hszh = {
        let sz_inv_h = {
            let mut cols = DMatrix::zeros(h.nrows(), h.ncols());
            for j in 0..h.ncols() {
                cols.set_column(j, &obs_noise.apply_inverse(&h.column(j).into_owned()));
            }
            cols
        };
        h.tr_mul(&sz_inv_h)
    };
    let sigma_inv = sigma_x_inv + hszh;
    let sigma = sigma_inv
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::LinAlg("posterior covariance inversion failed".into()))?;
    let sigma = (&sigma + sigma.transpose()) * 0.5;

    let rhs = sigma_x_inv * prediction
        + h.tr_mul(&obs_noise.apply_inverse(z_eff));
    let mu = &sigma * rhs;

    let sqrt_lower = nalgebra::Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::LinAlg("posterior covariance is not positive definite".into()))?
        .l();
    Ok(ClosedFormUpdate {
        phi,
        mu,
        sigma,
        sqrt_lower,
    })
}

/// Closed-form minimum of [`final_step_cost`] for an affine observation map
/// `h(x) = H x + c`. Requires a full-rank state covariance.
pub fn linear_obs_closed_form<M: StateSpaceModel + ?Sized>(
    model: &M,
    traj_end: &DVector<f64>,
    obs: &Observation,
) -> Result<ClosedFormUpdate> {
    if !model.noise().is_full_rank() {
        return Err(Error::SingularStateNoise(
            "closed-form update needs a full-rank state covariance".into(),
        ));
    }
    let m = model.state_dim();
    let prediction = model.drift(traj_end, obs.model_step.saturating_sub(1));
    let h = model.observation_jacobian(&prediction);
    // affine offset h(0)
    let offset = model.observe(&DVector::zeros(m));
    let z_eff = &obs.values - offset;

    let spec = model.noise();
    let sigma_x = spec.covariance();
    let sigma_x_inv = spec.eigenvectors()
        * DMatrix::from_diagonal(&spec.eigenvalues().map(|v| 1.0 / v))
        * spec.eigenvectors().transpose();
    closed_form_parts(&prediction, &h, &z_eff, &sigma_x_inv, sigma_x, model.obs_noise())
}

/// Closed-form update for the partial-noise case: the forced block is
/// updated with `R -> f`, diagonal `Sigma_x`, and the unforced block held
/// fixed at its model value.
pub fn linear_obs_closed_form_partial<P: PartialNoiseModel + ?Sized>(
    model: &P,
    prev_x: &DVector<f64>,
    prev_y: &DVector<f64>,
    obs: &Observation,
) -> Result<ClosedFormUpdate> {
    let prediction = model.forced_drift(prev_x, prev_y, obs.model_step - 1);
    let y_next = model.unforced_next(prev_x, prev_y, obs.model_step - 1);
    let (h_x, _) = model.obs_jacobians(&prediction, &y_next);
    // affine offset at x = 0 with the unforced block fixed
    let offset = model.observe(&DVector::zeros(model.forced_dim()), &y_next);
    let z_eff = &obs.values - offset;

    let sigma_diag = model.forced_noise_diag();
    let sigma_x = DMatrix::from_diagonal(sigma_diag);
    let sigma_x_inv = DMatrix::from_diagonal(&sigma_diag.map(|v| 1.0 / v));
    closed_form_parts(&prediction, &h_x, &z_eff, &sigma_x_inv, &sigma_x, model.obs_noise())
}

/// Assimilates one observation with the simplified implicit filter on a
/// full-noise model: `r - 1` free model steps with sampled noise, then one
/// implicit-sampling step at the observation.
pub fn assimilate<M: StateSpaceModel + ?Sized>(
    model: &M,
    ens: &mut Ensemble,
    obs: &Observation,
    opts: &FilterOptions,
) -> Result<StepReport> {
    if !model.noise().is_full_rank() {
        return Err(Error::SingularStateNoise(
            "state covariance is singular; use the partial-noise filter".into(),
        ));
    }
    let m = model.state_dim();
    let r = model.steps_per_obs();
    let start_step = obs.model_step - r;
    let n_particles = ens.len();

    let mut log_weights = vec![f64::NEG_INFINITY; n_particles];
    let mut rows = Vec::with_capacity(n_particles);
    let mut failed = 0usize;

    for j in 0..n_particles {
        let mut stream = rng::stream(opts.seed, &[rng::tag::PARTICLE, obs.index as u64, j as u64]);
        let prev_log_w = ens.particles[j].weight.ln();

        // free model run for r - 1 steps
        let mut state = ens.particles[j].x.clone();
        let mut segment = Vec::new();
        for k in 0..r - 1 {
            state = model.advance(&state, start_step + k, &mut stream);
            if opts.store_trajectories {
                segment.push(state.clone());
            }
        }
        let traj_end = state;

        let xi = rng::standard_normal_vector(&mut stream, m);
        let mut row = DiagRow {
            step: obs.model_step,
            particle: j,
            phi: f64::NAN,
            rho: xi.norm_squared(),
            lambda: f64::NAN,
            iters: 0,
            weight: 0.0,
            residual: f64::NAN,
            forced_dim: None,
        };

        if model.observation_is_affine() {
            match linear_obs_closed_form(model, &traj_end, obs) {
                Ok(update) => {
                    let x_new = update.sample(&xi);
                    // the Cholesky map solves the map equation exactly;
                    // record the actual residual as a diagnostic
                    let f_val = final_step_cost(model, &traj_end, obs, &x_new)?;
                    row.phi = update.phi;
                    row.residual = f_val - update.phi - 0.5 * row.rho;
                    log_weights[j] = prev_log_w - update.phi + update.log_det_sqrt();
                    let p = &mut ens.particles[j];
                    p.x = x_new.clone();
                    if opts.store_trajectories {
                        segment.push(x_new);
                        p.trajectory = Some(std::mem::take(&mut segment));
                    }
                }
                Err(_) => failed += 1,
            }
        } else {
            let cost =
                |x: &DVector<f64>| final_step_cost(model, &traj_end, obs, x).unwrap_or(f64::NAN);
            let grad = |x: &DVector<f64>| {
                final_step_cost_gradient(model, &traj_end, obs, x)
                    .unwrap_or_else(|_| DVector::from_element(m, f64::NAN))
            };
            let x0 = model.drift(&traj_end, obs.model_step - 1);
            let rec = minimize_gradient_descent(&cost, &grad, &x0, &opts.minimize);
            row.phi = rec.phi;
            row.iters = rec.iterations;
            match sample_random_map(&cost, &rec, xi, MapScale::Identity) {
                Ok(sample) => {
                    log_weights[j] =
                        log_map_weight(prev_log_w, rec.phi, &sample, MapScale::Identity, m);
                    row.lambda = sample.lambda;
                    row.residual = sample.residual;
                    let p = &mut ens.particles[j];
                    p.x = sample.x.clone();
                    if opts.store_trajectories {
                        segment.push(sample.x);
                        p.trajectory = Some(std::mem::take(&mut segment));
                    }
                }
                Err(_) => failed += 1,
            }
        }
        rows.push(row);
    }

    if failed == n_particles {
        return Err(Error::FilterDivergence(
            "every particle failed in the simplified filter step".into(),
        ));
    }
    ens.step = obs.model_step;
    finalize_step(ens, &log_weights, rows, failed, opts, obs.index)
}

/// Simplified implicit filter adapted to partial noise: `r - 1` free steps
/// (forced noise sampled, unforced deterministic), then a p-dimensional
/// implicit-sampling step at the observation.
pub fn assimilate_partial<P: PartialNoiseModel + ?Sized>(
    model: &P,
    ens: &mut Ensemble,
    obs: &Observation,
    opts: &FilterOptions,
) -> Result<StepReport> {
    let p_dim = model.forced_dim();
    let r = model.steps_per_obs();
    let start_step = obs.model_step - r;
    let n_particles = ens.len();

    let mut log_weights = vec![f64::NEG_INFINITY; n_particles];
    let mut rows = Vec::with_capacity(n_particles);
    let mut failed = 0usize;

    for j in 0..n_particles {
        let mut stream = rng::stream(opts.seed, &[rng::tag::PARTICLE, obs.index as u64, j as u64]);
        let prev_log_w = ens.particles[j].weight.ln();

        let mut x = ens.particles[j].x.clone();
        let mut y = ens.particles[j].y.clone();
        for k in 0..r - 1 {
            let (xn, yn) = model.advance(&x, &y, start_step + k, Some(&mut stream));
            x = xn;
            y = yn;
        }
        let y_next = model.unforced_next(&x, &y, obs.model_step - 1);

        let xi = rng::standard_normal_vector(&mut stream, p_dim);
        let mut row = DiagRow {
            step: obs.model_step,
            particle: j,
            phi: f64::NAN,
            rho: xi.norm_squared(),
            lambda: f64::NAN,
            iters: 0,
            weight: 0.0,
            residual: f64::NAN,
            forced_dim: Some(p_dim),
        };

        if model.observation_is_affine() {
            match linear_obs_closed_form_partial(model, &x, &y, obs) {
                Ok(update) => {
                    let x_new = update.sample(&xi);
                    row.phi = update.phi;
                    row.residual = 0.0;
                    log_weights[j] = prev_log_w - update.phi + update.log_det_sqrt();
                    let particle = &mut ens.particles[j];
                    particle.x = x_new;
                    particle.y = y_next;
                }
                Err(_) => failed += 1,
            }
        } else {
            let sigma = model.forced_noise_diag();
            let prediction = model.forced_drift(&x, &y, obs.model_step - 1);
            let cost = |xf: &DVector<f64>| {
                let resid = xf - &prediction;
                let mut c = 0.0;
                for i in 0..p_dim {
                    c += 0.5 * resid[i] * resid[i] / sigma[i];
                }
                let obs_resid = model.observe(xf, &y_next) - &obs.values;
                c + 0.5 * model.obs_noise().quad_form_inv(&obs_resid)
            };
            let grad = |xf: &DVector<f64>| {
                let mut g = DVector::zeros(p_dim);
                for i in 0..p_dim {
                    g[i] = (xf[i] - prediction[i]) / sigma[i];
                }
                let obs_resid = model.observe(xf, &y_next) - &obs.values;
                let (h_x, _) = model.obs_jacobians(xf, &y_next);
                g + h_x.tr_mul(&model.obs_noise().apply_inverse(&obs_resid))
            };
            let rec = minimize_gradient_descent(&cost, &grad, &prediction, &opts.minimize);
            row.phi = rec.phi;
            row.iters = rec.iterations;
            match sample_random_map(&cost, &rec, xi, MapScale::Identity) {
                Ok(sample) => {
                    log_weights[j] =
                        log_map_weight(prev_log_w, rec.phi, &sample, MapScale::Identity, p_dim);
                    row.lambda = sample.lambda;
                    row.residual = sample.residual;
                    let particle = &mut ens.particles[j];
                    particle.x = sample.x;
                    particle.y = y_next;
                }
                Err(_) => failed += 1,
            }
        }
        rows.push(row);
    }

    if failed == n_particles {
        return Err(Error::FilterDivergence(
            "every particle failed in the simplified partial filter step".into(),
        ));
    }
    ens.step = obs.model_step;
    finalize_step(ens, &log_weights, rows, failed, opts, obs.index)
}
