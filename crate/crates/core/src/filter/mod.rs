//! Sequential data-assimilation filters.
//!
//! All filters share the same contract: they take an ensemble at the last
//! observation time, assimilate the next observation (running the model
//! steps in between), mutate the ensemble in place, and return a
//! [`StepReport`] with the state estimate and per-particle diagnostics.
//!
//! Per-particle work draws from independent seeded streams, so results are
//! reproducible and do not depend on particle evaluation order.

pub mod baselines;
pub mod implicit;
pub mod minimize;
pub mod partial;
pub mod random_map;
pub mod simplified;

pub use minimize::{minimize_gradient_descent, MinimizeOptions, MinimumRecord};
pub use random_map::{log_map_weight, sample_random_map, MapSample, MapScale, MAP_RESIDUAL_TOL};

use nalgebra::DVector;
use std::io::Write;

use crate::ensemble::Ensemble;
use crate::error::Result;
use crate::rng;

/// Common filter options.
#[derive(Clone, Debug)]
pub struct FilterOptions {
    /// Minimizer settings for the implicit filters.
    pub minimize: MinimizeOptions,
    /// Resample when the effective sample size drops below
    /// `resample_frac * M`.
    pub resample_frac: f64,
    /// Master seed; per-particle streams are derived from it.
    pub seed: u64,
    /// Keep the assimilated trajectory segment on each particle.
    pub store_trajectories: bool,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            minimize: MinimizeOptions::default(),
            resample_frac: 0.9,
            seed: 0,
            store_trajectories: false,
        }
    }
}

impl FilterOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// Per-particle diagnostics of one assimilation step.
#[derive(Clone, Debug)]
pub struct DiagRow {
    pub step: usize,
    pub particle: usize,
    pub phi: f64,
    pub rho: f64,
    pub lambda: f64,
    pub iters: usize,
    pub weight: f64,
    /// Map-equation residual `F(X) - phi - rho/2` of the accepted sample.
    pub residual: f64,
    /// Forced dimension, for the partial-noise filters.
    pub forced_dim: Option<usize>,
}

/// Outcome of one assimilation step.
#[derive(Clone, Debug)]
pub struct StepReport {
    /// Effective sample size before any resampling.
    pub m_eff: f64,
    pub resampled: bool,
    /// Particles whose minimization or map solve failed (weight zero).
    pub failed: usize,
    /// Weighted-mean forced (or full) state.
    pub estimate_x: DVector<f64>,
    /// Weighted-mean unforced state (empty when not applicable).
    pub estimate_y: DVector<f64>,
    pub rows: Vec<DiagRow>,
}

/// Writes the diagnostics CSV header: `step,particle,phi,rho,lambda,iters,weight`
/// plus a trailing `p` column when `with_forced_dim` is set.
pub fn write_diag_header<W: Write>(out: &mut W, with_forced_dim: bool) -> std::io::Result<()> {
    if with_forced_dim {
        writeln!(out, "step,particle,phi,rho,lambda,iters,weight,p")
    } else {
        writeln!(out, "step,particle,phi,rho,lambda,iters,weight")
    }
}

/// Appends diagnostic rows in the fixed column order.
pub fn write_diag_rows<W: Write>(
    out: &mut W,
    rows: &[DiagRow],
    with_forced_dim: bool,
) -> std::io::Result<()> {
    for r in rows {
        if with_forced_dim {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.particle,
                r.phi,
                r.rho,
                r.lambda,
                r.iters,
                r.weight,
                r.forced_dim.unwrap_or(0)
            )?;
        } else {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.particle, r.phi, r.rho, r.lambda, r.iters, r.weight
            )?;
        }
    }
    Ok(())
}

/// Finishes an assimilation step: normalizes log weights, computes the
/// weighted-mean estimate, resamples when the effective sample size is
/// below `resample_frac * M`, and fills the report.
pub(crate) fn finalize_step(
    ens: &mut Ensemble,
    log_weights: &[f64],
    mut rows: Vec<DiagRow>,
    failed: usize,
    opts: &FilterOptions,
    obs_index: usize,
) -> Result<StepReport> {
    ens.set_weights_from_log(log_weights)?;
    for (row, p) in rows.iter_mut().zip(&ens.particles) {
        row.weight = p.weight;
    }
    let estimate_x = ens.weighted_mean_x();
    let estimate_y = ens.weighted_mean_y();
    let m_eff = ens.effective_sample_size()?;
    let resampled = m_eff < opts.resample_frac * ens.len() as f64;
    if resampled {
        let mut r = rng::stream(opts.seed, &[rng::tag::RESAMPLE, obs_index as u64]);
        let u: f64 = rand::Rng::gen(&mut r);
        ens.resample_systematic(u)?;
    }
    Ok(StepReport {
        m_eff,
        resampled,
        failed,
        estimate_x,
        estimate_y,
        rows,
    })
}
