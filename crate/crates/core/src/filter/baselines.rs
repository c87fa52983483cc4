//! Reference filters: SIR (bootstrap) and perturbed-observation EnKF.
//!
//! Both accept either a full-noise state-space model or a partial-noise
//! model; particles advance by running the model with sampled noise
//! (unforced variables deterministic where applicable).

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::filter::{finalize_step, DiagRow, FilterOptions, StepReport};
use crate::linalg::Covariance;
use crate::model::{Observation, PartialNoiseModel, StateSpaceModel};
use crate::rng;

/// A borrowed model of either kind, for filters that only need forward
/// simulation and the observation map.
#[derive(Clone, Copy)]
pub enum ModelRef<'a> {
    Full(&'a dyn StateSpaceModel),
    Partial(&'a dyn PartialNoiseModel),
}

impl<'a> ModelRef<'a> {
    pub fn steps_per_obs(&self) -> usize {
        match self {
            ModelRef::Full(m) => m.steps_per_obs(),
            ModelRef::Partial(m) => m.steps_per_obs(),
        }
    }

    pub fn obs_noise(&self) -> &'a Covariance {
        match self {
            ModelRef::Full(m) => m.obs_noise(),
            ModelRef::Partial(m) => m.obs_noise(),
        }
    }

    fn advance(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        step: usize,
        rng: &mut ChaCha8Rng,
    ) -> (DVector<f64>, DVector<f64>) {
        match self {
            ModelRef::Full(m) => (m.advance(x, step, rng), y.clone()),
            ModelRef::Partial(m) => m.advance(x, y, step, Some(rng)),
        }
    }

    fn observe(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        match self {
            ModelRef::Full(m) => m.observe(x),
            ModelRef::Partial(m) => m.observe(x, y),
        }
    }
}

/// One SIR (bootstrap filter) step: advance every particle `r` model steps
/// sampling the noise, weight by the observation likelihood, resample when
/// the effective sample size is low.
pub fn sir_step(
    model: ModelRef<'_>,
    ens: &mut Ensemble,
    obs: &Observation,
    opts: &FilterOptions,
) -> Result<StepReport> {
    let r = model.steps_per_obs();
    let start_step = obs.model_step - r;
    let mut log_weights = Vec::with_capacity(ens.len());
    let mut rows = Vec::with_capacity(ens.len());

    for (j, particle) in ens.particles.iter_mut().enumerate() {
        let mut stream = rng::stream(opts.seed, &[rng::tag::PARTICLE, obs.index as u64, j as u64]);
        let mut x = particle.x.clone();
        let mut y = particle.y.clone();
        for k in 0..r {
            let (xn, yn) = model.advance(&x, &y, start_step + k, &mut stream);
            x = xn;
            y = yn;
        }
        let resid = model.observe(&x, &y) - &obs.values;
        let misfit = 0.5 * model.obs_noise().quad_form_inv(&resid);
        log_weights.push(particle.weight.ln() - misfit);
        particle.x = x;
        particle.y = y;
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
    finalize_step(ens, &log_weights, rows, 0, opts, obs.index).map_err(|e| match e {
        Error::FilterDivergence(_) => {
            Error::FilterDivergence("every SIR particle weight underflowed".into())
        }
        other => other,
    })
}

/// One perturbed-observation EnKF step: forecast all members `r` steps with
/// sampled noise, then update each member with its own perturbed copy of
/// the observation through the sample-covariance Kalman gain. Weights stay
/// uniform.
pub fn enkf_step(
    model: ModelRef<'_>,
    ens: &mut Ensemble,
    obs: &Observation,
    opts: &FilterOptions,
) -> Result<StepReport> {
    let m_members = ens.len();
    if m_members < 2 {
        return Err(Error::Config("EnKF needs at least 2 members".into()));
    }
    let r = model.steps_per_obs();
    let start_step = obs.model_step - r;

    // forecast
    for (j, particle) in ens.particles.iter_mut().enumerate() {
        let mut stream = rng::stream(opts.seed, &[rng::tag::MEMBER, obs.index as u64, j as u64]);
        let mut x = particle.x.clone();
        let mut y = particle.y.clone();
        for k in 0..r {
            let (xn, yn) = model.advance(&x, &y, start_step + k, &mut stream);
            x = xn;
            y = yn;
        }
        particle.x = x;
        particle.y = y;
    }

    let x_len = ens.particles[0].x.len();
    let y_len = ens.particles[0].y.len();
    let n = x_len + y_len;
    let k_dim = obs.values.len();

    // anomalies of state and of predicted observations
    let mut state_mean = DVector::zeros(n);
    let mut obs_mean = DVector::zeros(k_dim);
    let states: Vec<DVector<f64>> = ens.particles.iter().map(|p| p.full_state()).collect();
    let predicted: Vec<DVector<f64>> = ens
        .particles
        .iter()
        .map(|p| model.observe(&p.x, &p.y))
        .collect();
    for (s, h) in states.iter().zip(&predicted) {
        state_mean += s;
        obs_mean += h;
    }
    state_mean /= m_members as f64;
    obs_mean /= m_members as f64;

    let mut a = DMatrix::zeros(n, m_members);
    let mut ha = DMatrix::zeros(k_dim, m_members);
    for j in 0..m_members {
        a.set_column(j, &(&states[j] - &state_mean));
        ha.set_column(j, &(&predicted[j] - &obs_mean));
    }
    let scale = 1.0 / (m_members as f64 - 1.0);

    // S = H P H' + Sigma_z, via observation anomalies
    let s_mat = &ha * ha.transpose() * scale + model.obs_noise().matrix();
    let s_chol = nalgebra::Cholesky::new(s_mat).ok_or_else(|| {
        Error::LinAlg("EnKF innovation covariance is numerically singular".into())
    })?;
    // K = P H' S^{-1} = A (HA)' S^{-1} / (M-1)
    let pht = &a * ha.transpose() * scale;
    let gain = s_chol.solve(&pht.transpose()).transpose();

    // per-member update with perturbed observations
    for (j, particle) in ens.particles.iter_mut().enumerate() {
        let mut stream = rng::stream(
            opts.seed,
            &[rng::tag::OBS_NOISE, obs.index as u64, j as u64],
        );
        let perturbed = &obs.values + model.obs_noise().sample(&mut stream);
        let innovation = perturbed - &predicted[j];
        let update = &gain * innovation;
        let full = &states[j] + update;
        particle.x = full.rows(0, x_len).into_owned();
        particle.y = full.rows(x_len, y_len).into_owned();
        particle.weight = 1.0 / m_members as f64;
    }

    ens.step = obs.model_step;
    let estimate_x = ens.weighted_mean_x();
    let estimate_y = ens.weighted_mean_y();
    Ok(StepReport {
        m_eff: m_members as f64,
        resampled: false,
        failed: 0,
        estimate_x,
        estimate_y,
        rows: Vec::new(),
    })
}
