//! The random map: turning a reference draw into a posterior sample.
//!
//! Given a located minimum `(phi, mu)` of a cost `F` and a standard normal
//! draw `xi`, the sample is `X = mu + lambda * L * eta` with
//! `eta = xi / |xi|`, where the scalar `lambda` solves
//!
//! ```text
//! F(mu + lambda L eta) - phi = rho / 2,      rho = xi' xi.
//! ```
//!
//! The sampling weight needs `|det L|`, `rho`, `lambda`, and the slope
//! `dlambda/drho = 1 / (2 dF/dlambda)` obtained from the same numerically
//! differenced slope the Newton iteration uses.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::filter::minimize::MinimumRecord;

/// Residual tolerance for the scalar solve: accepted samples satisfy
/// `|F(X) - phi - rho/2| <= MAP_RESIDUAL_TOL`.
pub const MAP_RESIDUAL_TOL: f64 = 1e-3;

/// Newton iteration cap for the scalar solve.
pub const MAP_MAX_NEWTON: usize = 100;

/// The deterministic matrix `L` of the map. The filters use the identity;
/// the general path is supported for diagonal `L`.
#[derive(Clone, Copy, Debug)]
pub enum MapScale<'a> {
    Identity,
    Diagonal(&'a DVector<f64>),
}

impl MapScale<'_> {
    /// `L eta`.
    fn apply(&self, eta: &DVector<f64>) -> DVector<f64> {
        match self {
            MapScale::Identity => eta.clone(),
            MapScale::Diagonal(d) => eta.component_mul(d),
        }
    }

    /// `log |det L|`.
    pub fn log_abs_det(&self) -> f64 {
        match self {
            MapScale::Identity => 0.0,
            MapScale::Diagonal(d) => d.iter().map(|v| v.abs().ln()).sum(),
        }
    }
}

/// A solved map sample.
#[derive(Clone, Debug)]
pub struct MapSample {
    /// Reference draw.
    pub xi: DVector<f64>,
    /// `xi' xi`.
    pub rho: f64,
    /// Unit direction `xi / sqrt(rho)`.
    pub eta: DVector<f64>,
    /// Solved map scalar.
    pub lambda: f64,
    /// `dlambda/drho` at the solution.
    pub dlambda_drho: f64,
    /// The sample `mu + lambda L eta`.
    pub x: DVector<f64>,
    /// `F(x) - phi - rho/2` at acceptance.
    pub residual: f64,
    /// Newton iterations used.
    pub newton_iters: usize,
}

/// Solves the map equation for one reference draw by Newton's method from
/// `lambda = 0` with a numerically differenced slope.
///
/// The first step is taken from a local quadratic model built from the same
/// probe evaluations, which also covers the case where the minimization was
/// exact and the slope at zero vanishes. Errors mark the particle as failed
/// (the caller assigns weight zero).
pub fn sample_random_map<F>(
    cost: F,
    rec: &MinimumRecord,
    xi: DVector<f64>,
    scale: MapScale<'_>,
) -> Result<MapSample>
where
    F: Fn(&DVector<f64>) -> f64,
{
    if !rec.converged {
        return Err(Error::NonFinite("minimization failed; particle dropped".into()));
    }
    let rho = xi.norm_squared();
    if rho == 0.0 {
        // measure-zero draw: the sample is the minimum itself
        return Ok(MapSample {
            eta: DVector::zeros(xi.len()),
            xi,
            rho: 0.0,
            lambda: 0.0,
            dlambda_drho: 0.0,
            x: rec.mu.clone(),
            residual: 0.0,
            newton_iters: 0,
        });
    }
    let eta = &xi / rho.sqrt();
    let dir = scale.apply(&eta);
    let phi = rec.phi;
    let f_line = |lambda: f64| cost(&(&rec.mu + lambda * &dir));
    let target = phi + 0.5 * rho;

    // probe both slope and curvature at lambda = 0 with one symmetric pair;
    // a fairly wide step keeps the curvature estimate clear of cancellation
    let h0 = 1e-3;
    let (fp, fm) = (f_line(h0), f_line(-h0));
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::NonFinite("cost not finite near the minimum".into()));
    }
    let slope0 = (fp - fm) / (2.0 * h0);
    let curv = (fp + fm - 2.0 * phi) / (h0 * h0);

    // first iterate from the local quadratic model phi + slope0 l + curv l^2 / 2
    let mut lambda = if curv > 0.0 {
        let disc = slope0 * slope0 + curv * rho;
        (-slope0 + disc.sqrt()) / curv
    } else if slope0 != 0.0 {
        0.5 * rho / slope0
    } else {
        1.0
    };
    if !lambda.is_finite() {
        return Err(Error::NonFinite("map initialization failed".into()));
    }

    let mut psi = f_line(lambda) - target;
    let mut slope = slope0;
    let mut iters = 0usize;
    let lambda_cap = 1e12 * (1.0 + lambda.abs());
    // once below the acceptance tolerance, keep polishing while Newton is in
    // its fast regime: the extra accuracy is nearly free and tightens the
    // sampling weights
    let polish_floor = 1e-12 * target.abs().max(1.0);
    let mut polish_left = 4usize;
    loop {
        if psi.abs() <= MAP_RESIDUAL_TOL {
            if psi.abs() <= polish_floor || polish_left == 0 {
                break;
            }
            polish_left -= 1;
        } else if iters >= MAP_MAX_NEWTON {
            return Err(Error::NonFinite(format!(
                "map equation did not converge: residual {psi:.3e}"
            )));
        }
        let h = 1e-6 * (1.0 + lambda.abs());
        slope = (f_line(lambda + h) - f_line(lambda - h)) / (2.0 * h);
        if slope == 0.0 || !slope.is_finite() {
            return Err(Error::NonFinite("degenerate slope in map equation".into()));
        }
        let lambda_next = lambda - psi / slope;
        if !lambda_next.is_finite() || lambda_next.abs() > lambda_cap {
            return Err(Error::NonFinite("map iteration diverged".into()));
        }
        let psi_next = f_line(lambda_next) - target;
        if !psi_next.is_finite() {
            return Err(Error::NonFinite("cost not finite along map direction".into()));
        }
        // inside the polish phase, stop at the floating-point floor
        if psi.abs() <= MAP_RESIDUAL_TOL && psi_next.abs() >= psi.abs() {
            break;
        }
        lambda = lambda_next;
        psi = psi_next;
        iters += 1;
    }

    // slope at the accepted root, for dlambda/drho
    let h = 1e-6 * (1.0 + lambda.abs());
    let slope_final = (f_line(lambda + h) - f_line(lambda - h)) / (2.0 * h);
    let slope_final = if slope_final != 0.0 { slope_final } else { slope };
    if slope_final == 0.0 || !slope_final.is_finite() {
        return Err(Error::NonFinite(
            "directional derivative vanishes at the map solution".into(),
        ));
    }

    Ok(MapSample {
        x: &rec.mu + lambda * &dir,
        xi,
        rho,
        eta,
        lambda,
        dlambda_drho: 1.0 / (2.0 * slope_final),
        residual: psi,
        newton_iters: iters,
    })
}

/// Log-domain sampling weight of one particle,
///
/// ```text
/// log w = log w_prev - phi + log|det L|
///         + (1 - dim/2) log rho + (dim - 1) log|lambda| + log|dlambda/drho|
/// ```
///
/// Non-finite intermediates collapse to `-inf` (weight zero).
pub fn log_map_weight(
    prev_log_w: f64,
    phi: f64,
    sample: &MapSample,
    scale: MapScale<'_>,
    dim: usize,
) -> f64 {
    let d = dim as f64;
    let lw = prev_log_w - phi
        + scale.log_abs_det()
        + (1.0 - 0.5 * d) * sample.rho.ln()
        + (d - 1.0) * sample.lambda.abs().ln()
        + sample.dlambda_drho.abs().ln();
    if lw.is_nan() {
        f64::NEG_INFINITY
    } else {
        lw
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::normalize_log_weights;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn quadratic_cost(a: DMatrix<f64>, mu: DVector<f64>, phi: f64) -> impl Fn(&DVector<f64>) -> f64 {
        move |x: &DVector<f64>| {
            let d = x - &mu;
            phi + 0.5 * d.dot(&(&a * &d))
        }
    }

    fn exact_record(mu: DVector<f64>, phi: f64) -> MinimumRecord {
        MinimumRecord {
            phi,
            mu,
            iterations: 0,
            converged: true,
        }
    }

    #[test]
    fn zero_draw_returns_the_minimum() {
        let mu = DVector::from_column_slice(&[1.0, -2.0]);
        let cost = quadratic_cost(DMatrix::identity(2, 2), mu.clone(), 3.0);
        let rec = exact_record(mu.clone(), 3.0);
        let s = sample_random_map(cost, &rec, DVector::zeros(2), MapScale::Identity).unwrap();
        assert_eq!(s.lambda, 0.0);
        assert_abs_diff_eq!((s.x - mu).amax(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn quadratic_solution_is_analytic() {
        // F = phi + 1/2 (x-mu)' A (x-mu)  =>  lambda = sqrt(rho / (eta' A eta))
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 1.5]);
        let mu = DVector::from_column_slice(&[0.3, -0.1]);
        let cost = quadratic_cost(a.clone(), mu.clone(), 0.7);
        let rec = exact_record(mu, 0.7);
        let mut r = rng::stream(2, &[4]);
        for _ in 0..50 {
            let xi = rng::standard_normal_vector(&mut r, 2);
            let rho = xi.norm_squared();
            let eta = &xi / rho.sqrt();
            let expected = (rho / eta.dot(&(&a * &eta))).sqrt();
            let s = sample_random_map(&cost, &rec, xi, MapScale::Identity).unwrap();
            assert_abs_diff_eq!(s.lambda, expected, epsilon = 1e-6 * (1.0 + expected));
            assert!(s.residual.abs() <= MAP_RESIDUAL_TOL);
        }
    }

    #[test]
    fn map_residual_enforced_on_nonquadratic_cost() {
        // exp-quartic bowl
        let mu = DVector::from_column_slice(&[0.0, 0.0]);
        let cost = |x: &DVector<f64>| x.norm_squared() + 0.3 * x.norm_squared().powi(2);
        let rec = exact_record(mu, 0.0);
        let mut r = rng::stream(9, &[1]);
        for _ in 0..100 {
            let xi = rng::standard_normal_vector(&mut r, 2);
            let s = sample_random_map(cost, &rec, xi, MapScale::Identity).unwrap();
            assert!(s.residual.abs() <= MAP_RESIDUAL_TOL);
        }
    }

    #[test]
    fn identical_particles_share_normalized_weight() {
        // same phi, rho, lambda for every particle -> weights 1/M
        let mu = DVector::zeros(3);
        let cost = quadratic_cost(DMatrix::identity(3, 3), mu.clone(), 2.0);
        let rec = exact_record(mu, 2.0);
        let xi = DVector::from_column_slice(&[0.4, -0.3, 1.1]);
        let mut log_ws = Vec::new();
        for _ in 0..4 {
            let s = sample_random_map(&cost, &rec, xi.clone(), MapScale::Identity).unwrap();
            log_ws.push(log_map_weight(0.0, 2.0, &s, MapScale::Identity, 3));
        }
        let w = normalize_log_weights(&log_ws).unwrap();
        for wi in w {
            assert_abs_diff_eq!(wi, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn dim_one_weight_reduces_to_sqrt_rho_slope() {
        // for dim = 1: rho^{1/2} * |lambda^0 dlambda/drho|
        let mu = DVector::from_column_slice(&[0.0]);
        let cost = quadratic_cost(DMatrix::identity(1, 1), mu.clone(), 0.0);
        let rec = exact_record(mu, 0.0);
        let xi = DVector::from_column_slice(&[1.3]);
        let s = sample_random_map(&cost, &rec, xi, MapScale::Identity).unwrap();
        let lw = log_map_weight(0.0, 0.0, &s, MapScale::Identity, 1);
        let expected = 0.5 * s.rho.ln() + s.dlambda_drho.abs().ln();
        assert_abs_diff_eq!(lw, expected, epsilon = 1e-12);
    }

    #[test]
    fn isotropic_quadratic_weight_matches_cholesky_map() {
        // For F with Hessian I/s^2 the identity-scale map coincides with the
        // Cholesky map X = mu + s xi, and the map factor is constant, so the
        // normalized weights equal normalized exp(-phi).
        let s2 = 0.4;
        let a = DMatrix::identity(3, 3) / s2;
        let mu = DVector::zeros(3);
        let mut r = rng::stream(21, &[3]);
        let mut lw_map = Vec::new();
        let mut lw_exact = Vec::new();
        for j in 0..20 {
            let phi = 0.1 * j as f64;
            let cost = quadratic_cost(a.clone(), mu.clone(), phi);
            let rec = exact_record(mu.clone(), phi);
            let xi = rng::standard_normal_vector(&mut r, 3);
            let sample = sample_random_map(&cost, &rec, xi.clone(), MapScale::Identity).unwrap();
            // the two maps give the same point
            let chol_x = &mu + s2.sqrt() * &xi;
            assert_abs_diff_eq!((&sample.x - chol_x).amax(), 0.0, epsilon = 1e-7);
            lw_map.push(log_map_weight(0.0, phi, &sample, MapScale::Identity, 3));
            lw_exact.push(-phi);
        }
        let w1 = normalize_log_weights(&lw_map).unwrap();
        let w2 = normalize_log_weights(&lw_exact).unwrap();
        for (a, b) in w1.iter().zip(&w2) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn failed_minimization_is_rejected() {
        let cost = |_: &DVector<f64>| 0.0;
        let rec = MinimumRecord {
            phi: 0.0,
            mu: DVector::zeros(1),
            iterations: 0,
            converged: false,
        };
        assert!(sample_random_map(
            cost,
            &rec,
            DVector::from_column_slice(&[1.0]),
            MapScale::Identity
        )
        .is_err());
    }
}
