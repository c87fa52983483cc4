//! Weighted particle ensembles, effective sample size, and systematic
//! resampling.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::normalize_log_weights;

/// Tolerance on the weight sum when an operation requires normalized weights.
const WEIGHT_SUM_TOL: f64 = 1e-9;

/// One particle: forced (or full) state `x`, unforced state `y` (possibly
/// empty), a normalized weight, and optionally the trajectory segment from
/// the latest assimilation step.
#[derive(Clone, Debug)]
pub struct Particle {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub weight: f64,
    pub trajectory: Option<Vec<DVector<f64>>>,
}

impl Particle {
    pub fn new(x: DVector<f64>, y: DVector<f64>, weight: f64) -> Self {
        Self {
            x,
            y,
            weight,
            trajectory: None,
        }
    }

    /// Concatenated `(x, y)` state.
    pub fn full_state(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.x.len() + self.y.len());
        s.rows_mut(0, self.x.len()).copy_from(&self.x);
        s.rows_mut(self.x.len(), self.y.len()).copy_from(&self.y);
        s
    }
}

/// A collection of weighted particles at a common model step.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub particles: Vec<Particle>,
    /// Model time index `n`.
    pub step: usize,
}

impl Ensemble {
    /// Builds an ensemble with uniform weights from bare states.
    pub fn from_states(states: Vec<(DVector<f64>, DVector<f64>)>) -> Self {
        let m = states.len();
        let w = 1.0 / m as f64;
        Self {
            particles: states
                .into_iter()
                .map(|(x, y)| Particle::new(x, y, w))
                .collect(),
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.weight).collect()
    }

    /// Replaces weights from log-domain values, normalizing to sum one.
    pub fn set_weights_from_log(&mut self, log_w: &[f64]) -> Result<()> {
        debug_assert_eq!(log_w.len(), self.len());
        let w = normalize_log_weights(log_w)?;
        for (p, w) in self.particles.iter_mut().zip(w) {
            p.weight = w;
        }
        Ok(())
    }

    /// Weighted mean of the forced/full states.
    pub fn weighted_mean_x(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.particles[0].x.len());
        for p in &self.particles {
            acc += p.weight * &p.x;
        }
        acc
    }

    /// Weighted mean of the unforced states (empty when there are none).
    pub fn weighted_mean_y(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.particles[0].y.len());
        for p in &self.particles {
            acc += p.weight * &p.y;
        }
        acc
    }

    /// Effective sample size `1 / sum(w^2)`; requires normalized weights.
    pub fn effective_sample_size(&self) -> Result<f64> {
        effective_sample_size(&self.weights())
    }

    /// Systematic (low-variance) resampling driven by one uniform draw
    /// `u in [0, 1)`. Output weights are uniform.
    pub fn resample_systematic(&mut self, u: f64) -> Result<()> {
        let counts = systematic_offspring(&self.weights(), self.len(), u)?;
        let mut new_particles = Vec::with_capacity(self.len());
        let w = 1.0 / self.len() as f64;
        for (j, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                let mut p = self.particles[j].clone();
                p.weight = w;
                new_particles.push(p);
            }
        }
        debug_assert_eq!(new_particles.len(), self.len());
        self.particles = new_particles;
        Ok(())
    }
}

/// Effective sample size `1 / sum(w_j^2)` of normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::UnnormalizedWeights(sum));
    }
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    Ok(1.0 / sq)
}

/// Offspring counts of systematic resampling with `m` output particles and
/// threshold positions `(u + i) / m`, `u in [0, 1)`.
///
/// Every count satisfies `floor(m w_j) <= count_j <= ceil(m w_j)`.
pub fn systematic_offspring(weights: &[f64], m: usize, u: f64) -> Result<Vec<usize>> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::UnnormalizedWeights(sum));
    }
    if !(0.0..1.0).contains(&u) {
        return Err(Error::Config(format!("resampling draw {u} outside [0, 1)")));
    }
    let mut counts = vec![0usize; weights.len()];
    let mut cum = 0.0;
    let mut i = 0usize; // next threshold index
    for (j, &w) in weights.iter().enumerate() {
        cum += w;
        // thresholds strictly below cum (with a final sweep for rounding)
        while i < m && (u + i as f64) / (m as f64) < cum {
            counts[j] += 1;
            i += 1;
        }
    }
    // rounding at the top of the CDF: assign leftovers to the last positive weight
    if i < m {
        if let Some(j) = weights.iter().rposition(|&w| w > 0.0) {
            counts[j] += m - i;
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn ess_uniform_weights() {
        let w = vec![0.1; 10];
        assert_abs_diff_eq!(effective_sample_size(&w).unwrap(), 10.0, epsilon = 1e-12);
    }

    #[test]
    fn ess_degenerate_weight() {
        let mut w = vec![0.0; 8];
        w[3] = 1.0;
        assert_abs_diff_eq!(effective_sample_size(&w).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ess_half_half() {
        let w = vec![0.5, 0.5, 0.0, 0.0];
        assert_abs_diff_eq!(effective_sample_size(&w).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn ess_rejects_unnormalized() {
        assert!(effective_sample_size(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn degenerate_weight_copies_single_particle() {
        let m = 6;
        let mut w = vec![0.0; m];
        w[0] = 1.0;
        let counts = systematic_offspring(&w, m, 0.37).unwrap();
        assert_eq!(counts[0], m);
        assert!(counts[1..].iter().all(|&c| c == 0));
    }

    #[test]
    fn offspring_counts_bracket_expected_values() {
        let mut r = crate::rng::stream(5, &[17]);
        for _ in 0..200 {
            let n = 1 + (r.gen::<u64>() % 12) as usize;
            let raw: Vec<f64> = (0..n).map(|_| r.gen::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let m = 1 + (r.gen::<u64>() % 50) as usize;
            let u = r.gen::<f64>();
            let counts = systematic_offspring(&w, m, u).unwrap();
            assert_eq!(counts.iter().sum::<usize>(), m);
            for (j, &c) in counts.iter().enumerate() {
                let mw = m as f64 * w[j];
                assert!(
                    (c as f64) >= mw.floor() - 1e-9 && (c as f64) <= mw.ceil() + 1e-9,
                    "count {c} outside [{}, {}]",
                    mw.floor(),
                    mw.ceil()
                );
            }
        }
    }

    #[test]
    fn uniform_weights_preserve_everyone() {
        // with equal weights every particle gets exactly one offspring
        let w = vec![0.25; 4];
        let counts = systematic_offspring(&w, 4, 0.9).unwrap();
        assert_eq!(counts, vec![1, 1, 1, 1]);
    }

    #[test]
    fn resampled_ensemble_has_uniform_weights() {
        let states = (0..5)
            .map(|i| (DVector::from_element(2, i as f64), DVector::zeros(0)))
            .collect();
        let mut ens = Ensemble::from_states(states);
        ens.set_weights_from_log(&[-0.5, -4.0, -0.1, -9.0, -2.0]).unwrap();
        ens.resample_systematic(0.123).unwrap();
        for p in &ens.particles {
            assert_abs_diff_eq!(p.weight, 0.2, epsilon = 1e-15);
        }
        assert_eq!(ens.len(), 5);
    }

    #[test]
    fn weighted_mean_tracks_weights() {
        let states = vec![
            (DVector::from_column_slice(&[0.0]), DVector::zeros(0)),
            (DVector::from_column_slice(&[10.0]), DVector::zeros(0)),
        ];
        let mut ens = Ensemble::from_states(states);
        ens.particles[0].weight = 0.75;
        ens.particles[1].weight = 0.25;
        assert_abs_diff_eq!(ens.weighted_mean_x()[0], 2.5, epsilon = 1e-12);
    }
}
