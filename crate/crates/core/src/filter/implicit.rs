//! The full-noise implicit particle filter.
//!
//! Per particle and observation, the trajectory cost over the `r` model
//! steps leading to the observation is
//!
//! ```text
//! F(X) = sum_k 1/2 (X^k - R(X^{k-1}))' Sigma_x^{-1} (X^k - R(X^{k-1}))
//!      + 1/2 (h(X^K) - z)' Sigma_z^{-1} (h(X^K) - z)
//! ```
//!
//! with `X` the stacked candidate trajectory (dimension `r * m`). The filter
//! minimizes `F` by gradient descent, maps a reference draw onto the
//! trajectory through the random map with identity scale, and weights the
//! particle accordingly. The additive normalization constant is zero here
//! because the noise covariances are particle-independent and cancel in the
//! normalized weights.

use nalgebra::DVector;

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::filter::{
    finalize_step, log_map_weight, minimize_gradient_descent, sample_random_map, DiagRow,
    FilterOptions, MapScale, StepReport,
};
use crate::model::{Observation, StateSpaceModel};
use crate::rng;
use crate::filter::simplified;

fn require_full_rank<M: StateSpaceModel + ?Sized>(model: &M) -> Result<()> {
    if !model.noise().is_full_rank() {
        return Err(Error::SingularStateNoise(
            "state covariance is singular; use the partial-noise filter".into(),
        ));
    }
    Ok(())
}

fn block(x: &DVector<f64>, k: usize, m: usize) -> DVector<f64> {
    x.rows(k * m, m).into_owned()
}

/// Trajectory cost of one particle: `r` Mahalanobis transition terms plus
/// the observation misfit. `x_traj` packs the candidate states for steps
/// `start_step + 1 ..= start_step + r`.
pub fn trajectory_cost<M: StateSpaceModel + ?Sized>(
    model: &M,
    start: &DVector<f64>,
    obs: &Observation,
    x_traj: &DVector<f64>,
) -> Result<f64> {
    require_full_rank(model)?;
    let m = model.state_dim();
    let r = model.steps_per_obs();
    if x_traj.len() != r * m {
        return Err(Error::DimensionMismatch(format!(
            "trajectory has length {}, expected r*m = {}",
            x_traj.len(),
            r * m
        )));
    }
    let start_step = obs.model_step - r;
    let mut cost = 0.0;
    let mut prev = start.clone();
    for k in 0..r {
        let xk = block(x_traj, k, m);
        let resid = &xk - model.drift(&prev, start_step + k);
        cost += 0.5 * model.noise().quad_form_inv(&resid)?;
        prev = xk;
    }
    let obs_resid = model.observe(&prev) - &obs.values;
    cost += 0.5 * model.obs_noise().quad_form_inv(&obs_resid);
    Ok(cost)
}

/// Gradient of [`trajectory_cost`] with respect to the stacked trajectory.
///
/// Interior blocks carry the transition residual minus the
/// Jacobian-propagated next-step residual; the final block carries the
/// transition residual plus the observation term.
pub fn trajectory_cost_gradient<M: StateSpaceModel + ?Sized>(
    model: &M,
    start: &DVector<f64>,
    obs: &Observation,
    x_traj: &DVector<f64>,
) -> Result<DVector<f64>> {
    require_full_rank(model)?;
    let m = model.state_dim();
    let r = model.steps_per_obs();
    let start_step = obs.model_step - r;

    // scaled residuals Sigma_x^{-1} (X^k - R^{k-1}) for k = 1..r
    let mut scaled = Vec::with_capacity(r);
    let mut prev = start.clone();
    for k in 0..r {
        let xk = block(x_traj, k, m);
        let resid = &xk - model.drift(&prev, start_step + k);
        scaled.push(model.noise().apply_inverse(&resid)?);
        prev = xk;
    }
    let last = block(x_traj, r - 1, m);
    let obs_resid = model.observe(&last) - &obs.values;
    let obs_scaled = model.obs_noise().apply_inverse(&obs_resid);

    let mut grad = DVector::zeros(r * m);
    for k in 0..r {
        let xk = block(x_traj, k, m);
        let mut gk = scaled[k].clone();
        if k + 1 < r {
            let jac = model.drift_jacobian(&xk, start_step + k + 1);
            gk -= jac.tr_mul(&scaled[k + 1]);
        } else {
            let h_jac = model.observation_jacobian(&xk);
            gk += h_jac.tr_mul(&obs_scaled);
        }
        grad.rows_mut(k * m, m).copy_from(&gk);
    }
    Ok(grad)
}

/// Initial trajectory for the minimization: the deterministic model run,
/// with the final block replaced by the closed-form minimizer when the
/// observation map is affine.
fn initial_trajectory<M: StateSpaceModel + ?Sized>(
    model: &M,
    start: &DVector<f64>,
    obs: &Observation,
) -> DVector<f64> {
    let m = model.state_dim();
    let r = model.steps_per_obs();
    let start_step = obs.model_step - r;
    let mut traj = DVector::zeros(r * m);
    let mut prev = start.clone();
    for k in 0..r {
        prev = model.drift(&prev, start_step + k);
        traj.rows_mut(k * m, m).copy_from(&prev);
    }
    if model.observation_is_affine() {
        let before_last = if r >= 2 {
            block(&traj, r - 2, m)
        } else {
            start.clone()
        };
        if let Ok(update) = simplified::linear_obs_closed_form(model, &before_last, obs) {
            traj.rows_mut((r - 1) * m, m).copy_from(&update.mu);
        }
    }
    traj
}

/// Assimilates one observation with the full-noise implicit filter.
///
/// Requires a full-rank state covariance. Particles whose minimization or
/// map solve fails get weight zero; the step fails only when every particle
/// does.
pub fn assimilate<M: StateSpaceModel + ?Sized>(
    model: &M,
    ens: &mut Ensemble,
    obs: &Observation,
    opts: &FilterOptions,
) -> Result<StepReport> {
    require_full_rank(model)?;
    let m = model.state_dim();
    let r = model.steps_per_obs();
    let dim = r * m;
    let n_particles = ens.len();

    let mut log_weights = vec![f64::NEG_INFINITY; n_particles];
    let mut rows = Vec::with_capacity(n_particles);
    let mut failed = 0usize;

    for j in 0..n_particles {
        let start = ens.particles[j].x.clone();
        let prev_log_w = ens.particles[j].weight.ln();
        let cost = |x: &DVector<f64>| trajectory_cost(model, &start, obs, x).unwrap_or(f64::NAN);
        let grad = |x: &DVector<f64>| {
            trajectory_cost_gradient(model, &start, obs, x)
                .unwrap_or_else(|_| DVector::from_element(dim, f64::NAN))
        };

        let x0 = initial_trajectory(model, &start, obs);
        let rec = minimize_gradient_descent(&cost, &grad, &x0, &opts.minimize);

        let mut stream = rng::stream(opts.seed, &[rng::tag::PARTICLE, obs.index as u64, j as u64]);
        let xi = rng::standard_normal_vector(&mut stream, dim);

        let mut row = DiagRow {
            step: obs.model_step,
            particle: j,
            phi: rec.phi,
            rho: xi.norm_squared(),
            lambda: f64::NAN,
            iters: rec.iterations,
            weight: 0.0,
            residual: f64::NAN,
            forced_dim: None,
        };

        match sample_random_map(&cost, &rec, xi, MapScale::Identity) {
            Ok(sample) => {
                log_weights[j] =
                    log_map_weight(prev_log_w, rec.phi, &sample, MapScale::Identity, dim);
                row.lambda = sample.lambda;
                row.residual = sample.residual;
                let p = &mut ens.particles[j];
                p.x = block(&sample.x, r - 1, m);
                p.trajectory = opts
                    .store_trajectories
                    .then(|| (0..r).map(|k| block(&sample.x, k, m)).collect());
            }
            Err(_) => {
                failed += 1;
            }
        }
        rows.push(row);
    }

    if failed == n_particles {
        return Err(Error::FilterDivergence(
            "every particle failed in the implicit filter step".into(),
        ));
    }
    ens.step = obs.model_step;
    finalize_step(ens, &log_weights, rows, failed, opts, obs.index)
}
