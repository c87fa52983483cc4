//! Implicit particle filtering for models with partial noise.
//!
//! The cost of a particle depends on the forced trajectory only; unforced
//! variables are reconstructed from the model as the trajectory changes.
//! The gradient threads the dependence of later unforced states on earlier
//! forced states through the sensitivity recursion
//!
//! ```text
//! dY^{k+1}/dX^k = dg/dx|_k,
//! dY^{i}/dX^k   = dg/dy|_{i-1} * dY^{i-1}/dX^k,
//! ```
//!
//! computed forward while the gradient blocks are assembled. Everything
//! lives in the forced subspace: minimizations and reference draws are
//! `r * p`-dimensional.

use nalgebra::DVector;

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::filter::{
    finalize_step, log_map_weight, minimize_gradient_descent, sample_random_map, DiagRow,
    FilterOptions, MapScale, StepReport,
};
use crate::linalg::Covariance;
use crate::model::{Observation, PartialNoiseModel, StepJacobians};
use crate::rng;

fn block(x: &DVector<f64>, k: usize, p: usize) -> DVector<f64> {
    x.rows(k * p, p).into_owned()
}

/// Deterministic unforced path: `y[i+1] = g(x[i], y[i])` driven by the
/// forced trajectory. Output has the same length as `x_traj`; its last
/// entry uses `x_traj` up to the next-to-last block only.
pub fn propagate_unforced<P: PartialNoiseModel + ?Sized>(
    model: &P,
    x_traj: &[DVector<f64>],
    x0: &DVector<f64>,
    y0: &DVector<f64>,
    start_step: usize,
) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(x_traj.len());
    let y = model.unforced_next(x0, y0, start_step);
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("unforced propagation produced non-finite values".into()));
    }
    out.push(y);
    for (i, x) in x_traj.iter().enumerate().take(x_traj.len().saturating_sub(1)) {
        let y = model.unforced_next(x, &out[i], start_step + i + 1);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(
                "unforced propagation produced non-finite values".into(),
            ));
        }
        out.push(y);
    }
    Ok(out)
}

/// Dense-data (r = 1) cost: one forced transition term plus the observation
/// misfit, with the unforced state fixed at its model value.
pub fn forced_cost_dense<P: PartialNoiseModel + ?Sized>(
    model: &P,
    prev_x: &DVector<f64>,
    prev_y: &DVector<f64>,
    obs: &Observation,
    x_next: &DVector<f64>,
) -> Result<f64> {
    let step = obs.model_step - 1;
    let prediction = model.forced_drift(prev_x, prev_y, step);
    let y_next = model.unforced_next(prev_x, prev_y, step);
    let sigma = model.forced_noise_diag();
    let mut cost = 0.0;
    for i in 0..x_next.len() {
        let r = x_next[i] - prediction[i];
        cost += 0.5 * r * r / sigma[i];
    }
    let obs_resid = model.observe(x_next, &y_next) - &obs.values;
    cost += 0.5 * model.obs_noise().quad_form_inv(&obs_resid);
    Ok(cost)
}

/// Sparse-data cost over the stacked forced trajectory (dimension `r * p`):
/// the unforced path is reconstructed from the model, then `r` forced
/// transition terms plus the observation misfit at the final step.
pub fn forced_cost<P: PartialNoiseModel + ?Sized>(
    model: &P,
    start_x: &DVector<f64>,
    start_y: &DVector<f64>,
    obs: &Observation,
    x_packed: &DVector<f64>,
) -> Result<f64> {
    let p = model.forced_dim();
    let r = model.steps_per_obs();
    if x_packed.len() != r * p {
        return Err(Error::DimensionMismatch(format!(
            "forced trajectory has length {}, expected r*p = {}",
            x_packed.len(),
            r * p
        )));
    }
    let start_step = obs.model_step - r;
    let x_blocks: Vec<DVector<f64>> = (0..r).map(|k| block(x_packed, k, p)).collect();
    let y_path = propagate_unforced(model, &x_blocks, start_x, start_y, start_step)?;
    let sigma = model.forced_noise_diag();

    let mut cost = 0.0;
    let mut prev_x = start_x;
    let mut prev_y = start_y;
    for k in 0..r {
        let prediction = model.forced_drift(prev_x, prev_y, start_step + k);
        for i in 0..p {
            let res = x_blocks[k][i] - prediction[i];
            cost += 0.5 * res * res / sigma[i];
        }
        prev_x = &x_blocks[k];
        prev_y = &y_path[k];
    }
    let obs_resid = model.observe(&x_blocks[r - 1], &y_path[r - 1]) - &obs.values;
    cost += 0.5 * model.obs_noise().quad_form_inv(&obs_resid);
    Ok(cost)
}

/// Gradient of [`forced_cost`] with the forward sensitivity recursion.
pub fn forced_cost_gradient<P: PartialNoiseModel + ?Sized>(
    model: &P,
    start_x: &DVector<f64>,
    start_y: &DVector<f64>,
    obs: &Observation,
    x_packed: &DVector<f64>,
) -> Result<DVector<f64>> {
    let p = model.forced_dim();
    let r = model.steps_per_obs();
    let start_step = obs.model_step - r;
    let x_blocks: Vec<DVector<f64>> = (0..r).map(|k| block(x_packed, k, p)).collect();
    let y_path = propagate_unforced(model, &x_blocks, start_x, start_y, start_step)?;
    let sigma = model.forced_noise_diag();

    // scaled residuals Sigma^{-1} (X^k - f^{k-1})
    let mut scaled = Vec::with_capacity(r);
    {
        let mut prev_x = start_x;
        let mut prev_y = start_y;
        for k in 0..r {
            let prediction = model.forced_drift(prev_x, prev_y, start_step + k);
            scaled.push(DVector::from_fn(p, |i, _| {
                (x_blocks[k][i] - prediction[i]) / sigma[i]
            }));
            prev_x = &x_blocks[k];
            prev_y = &y_path[k];
        }
    }

    // coupling Jacobians at trajectory points 0 .. r-2 (shared by all blocks)
    let jacs: Vec<StepJacobians> = (0..r.saturating_sub(1))
        .map(|i| model.step_jacobians(&x_blocks[i], &y_path[i], start_step + i + 1))
        .collect();

    let obs_resid = model.observe(&x_blocks[r - 1], &y_path[r - 1]) - &obs.values;
    let obs_scaled = model.obs_noise().apply_inverse(&obs_resid);
    let (h_x, h_y) = model.obs_jacobians(&x_blocks[r - 1], &y_path[r - 1]);
    let hy_scaled = h_y.tr_mul(&obs_scaled);

    let mut grad = DVector::zeros(r * p);
    for i in 0..r {
        let mut gi = scaled[i].clone();
        if i + 1 < r {
            gi -= jacs[i].f_x.tr_mul(&scaled[i + 1]);
        }
        if i + 1 == r {
            // final block: direct observation dependence
            gi += h_x.tr_mul(&obs_scaled);
        } else {
            // sensitivity chain through the unforced path
            let mut s = jacs[i].g_x.clone(); // dY^{i+1}/dX^i
            for j in (i + 1)..(r - 1) {
                // s holds dY^j/dX^i; the transition at j+1 sees it through f_y
                let v = jacs[j].f_y.tr_mul(&scaled[j + 1]);
                gi -= s.tr_mul(&v);
                s = &jacs[j].g_y * s;
            }
            // s now holds dY^{r-1}/dX^i for the observation chain
            gi += s.tr_mul(&hy_scaled);
        }
        grad.rows_mut(i * p, p).copy_from(&gi);
    }
    Ok(grad)
}

/// Assimilates one observation with the partial-noise implicit filter.
///
/// The minimization is initialized with a deterministic free model run over
/// the `r` steps; unforced variables are refreshed from the model at every
/// cost and gradient evaluation, so each accepted descent step sees a
/// consistent unforced path.
pub fn assimilate<P: PartialNoiseModel + ?Sized>(
    model: &P,
    ens: &mut Ensemble,
    obs: &Observation,
    opts: &FilterOptions,
) -> Result<StepReport> {
    let p = model.forced_dim();
    let r = model.steps_per_obs();
    let dim = r * p;
    let start_step = obs.model_step - r;
    let n_particles = ens.len();

    let mut log_weights = vec![f64::NEG_INFINITY; n_particles];
    let mut rows = Vec::with_capacity(n_particles);
    let mut failed = 0usize;

    for j in 0..n_particles {
        let start_x = ens.particles[j].x.clone();
        let start_y = ens.particles[j].y.clone();
        let prev_log_w = ens.particles[j].weight.ln();

        let cost = |x: &DVector<f64>| {
            forced_cost(model, &start_x, &start_y, obs, x).unwrap_or(f64::NAN)
        };
        let grad = |x: &DVector<f64>| {
            forced_cost_gradient(model, &start_x, &start_y, obs, x)
                .unwrap_or_else(|_| DVector::from_element(dim, f64::NAN))
        };

        // free model run initialization
        let mut x0 = DVector::zeros(dim);
        {
            let mut x = start_x.clone();
            let mut y = start_y.clone();
            for k in 0..r {
                let (xn, yn) = model.advance(&x, &y, start_step + k, None);
                x0.rows_mut(k * p, p).copy_from(&xn);
                x = xn;
                y = yn;
            }
        }

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
            forced_dim: Some(p),
        };

        match sample_random_map(&cost, &rec, xi, MapScale::Identity) {
            Ok(sample) => {
                log_weights[j] =
                    log_map_weight(prev_log_w, rec.phi, &sample, MapScale::Identity, dim);
                row.lambda = sample.lambda;
                row.residual = sample.residual;
                let x_blocks: Vec<DVector<f64>> = (0..r).map(|k| block(&sample.x, k, p)).collect();
                let y_path = propagate_unforced(model, &x_blocks, &start_x, &start_y, start_step)?;
                let particle = &mut ens.particles[j];
                particle.x = x_blocks[r - 1].clone();
                particle.y = y_path[r - 1].clone();
                if opts.store_trajectories {
                    particle.trajectory = Some(
                        x_blocks
                            .iter()
                            .zip(&y_path)
                            .map(|(x, y)| {
                                let mut s = DVector::zeros(x.len() + y.len());
                                s.rows_mut(0, x.len()).copy_from(x);
                                s.rows_mut(x.len(), y.len()).copy_from(y);
                                s
                            })
                            .collect(),
                    );
                }
            }
            Err(_) => {
                failed += 1;
            }
        }
        rows.push(row);
    }

    if failed == n_particles {
        return Err(Error::FilterDivergence(
            "every particle failed in the partial-noise filter step".into(),
        ));
    }
    ens.step = obs.model_step;
    finalize_step(ens, &log_weights, rows, failed, opts, obs.index)
}

/// Weight update for a perfect (deterministic) model: trajectories are left
/// untouched, each weight is multiplied by `exp(-F_j)` with `F_j` the
/// observation misfit of the particle's current state.
pub fn perfect_model_update<H>(
    ens: &mut Ensemble,
    obs: &Observation,
    observe: H,
    obs_noise: &Covariance,
    opts: &FilterOptions,
) -> Result<StepReport>
where
    H: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let mut log_weights = Vec::with_capacity(ens.len());
    let mut rows = Vec::with_capacity(ens.len());
    for (j, particle) in ens.particles.iter().enumerate() {
        let resid = observe(&particle.x, &particle.y) - &obs.values;
        let misfit = 0.5 * obs_noise.quad_form_inv(&resid);
        log_weights.push(particle.weight.ln() - misfit);
        rows.push(DiagRow {
            step: obs.model_step,
            particle: j,
            phi: misfit,
            rho: f64::NAN,
            lambda: f64::NAN,
            iters: 0,
            weight: 0.0,
            residual: f64::NAN,
            forced_dim: None,
        });
    }
    ens.step = obs.model_step;
    finalize_step(ens, &log_weights, rows, 0, opts, obs.index)
}
