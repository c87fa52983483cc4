//! Partial-noise form of the spectral-element test problem.
//!
//! Per field, the generalized symmetric eigenproblem
//! `Sigma v = theta (M - delta D M D2) v` yields a basis `V` with
//! `V' A V = I` and `V' Sigma V = diag(theta)`. Writing the field as
//! `u = V w` turns the implicit step `A u' = M rhs + dW` into the explicit
//! transformed step `w' = V' (M rhs) + noise` whose additive noise has the
//! diagonal covariance `diag(theta)` exactly: the implicit solve is
//! absorbed into the transform. Coordinates with `theta > 0` are forced,
//! the rest evolve deterministically.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geo::GeoModel;
use crate::linalg::{symmetric_eigen_desc, Covariance};
use crate::model::{PartialNoiseModel, StepJacobians};

/// Relative eigenvalue cutoff for the forced subspace.
const FORCED_EIG_THRESHOLD: f64 = 1e-10;

struct FieldTransform {
    /// Eigenvectors, descending theta, `V' A V = I`.
    v: DMatrix<f64>,
    /// `V^{-1} = V' A`, for mapping physical fields into the basis.
    v_inv: DMatrix<f64>,
    /// `D_int V`, precomputed for the step Jacobians.
    dv: DMatrix<f64>,
    theta: DVector<f64>,
    forced: usize,
}

fn solve_field_pencil(
    sigma: &DMatrix<f64>,
    lhs: &DMatrix<f64>,
    d_int: &DMatrix<f64>,
) -> Result<FieldTransform> {
    let m = sigma.nrows();
    let chol = nalgebra::Cholesky::new(lhs.clone())
        .ok_or_else(|| Error::LinAlg("implicit operator not positive definite".into()))?;
    let l = chol.l();
    // B = L^{-1} Sigma L^{-T}, symmetric
    let t1 = l
        .solve_lower_triangular(sigma)
        .ok_or_else(|| Error::LinAlg("triangular solve failed".into()))?;
    let t2 = l
        .solve_lower_triangular(&t1.transpose())
        .ok_or_else(|| Error::LinAlg("triangular solve failed".into()))?;
    let b = (&t2 + t2.transpose()) * 0.5;
    let (theta, q) = symmetric_eigen_desc(&b);
    // V = L^{-T} Q
    let v = l
        .transpose()
        .solve_upper_triangular(&q)
        .ok_or_else(|| Error::LinAlg("triangular solve failed".into()))?;
    let v_inv = v.tr_mul(lhs);
    let dv = d_int * &v;
    let max = theta.iter().copied().fold(0.0f64, f64::max);
    let forced = theta
        .iter()
        .filter(|&&t| t > FORCED_EIG_THRESHOLD * max)
        .count();
    let theta = theta.map(|t| t.max(0.0));
    Ok(FieldTransform {
        v,
        v_inv,
        dv,
        theta,
        forced,
    })
}

/// The test problem in forced/unforced coordinates, ready for the
/// partial-noise filters. State layout: `x = (x_u, x_b)` (forced),
/// `y = (y_u, y_b)` (unforced).
pub struct GeoPartialModel {
    geo: GeoModel,
    field_u: FieldTransform,
    field_b: FieldTransform,
    sigma_diag: DVector<f64>,
    /// `H V_b` plus the boundary offset: the observation in the basis.
    hv_b: DMatrix<f64>,
    h_x: DMatrix<f64>,
    h_y: DMatrix<f64>,
    steps_per_obs: usize,
}

impl GeoPartialModel {
    pub fn new(geo: GeoModel, steps_per_obs: usize) -> Result<Self> {
        if steps_per_obs == 0 {
            return Err(Error::Config("steps_per_obs must be at least 1".into()));
        }
        let field_u = solve_field_pencil(geo.sigma_u(), geo.lhs_u(), &geo.d_int)?;
        let field_b = solve_field_pencil(geo.sigma_b(), geo.lhs_b(), &geo.d_int)?;

        let p_u = field_u.forced;
        let p_b = field_b.forced;
        let mut sigma_diag = DVector::zeros(p_u + p_b);
        for i in 0..p_u {
            sigma_diag[i] = field_u.theta[i];
        }
        for i in 0..p_b {
            sigma_diag[p_u + i] = field_b.theta[i];
        }

        let m = geo.interior_dim();
        let k = geo.config().obs_count;
        let hv_b = geo.obs_interior() * &field_b.v;
        // observation depends on the b coordinates only
        let mut h_x = DMatrix::zeros(k, p_u + p_b);
        h_x.view_mut((0, p_u), (k, p_b))
            .copy_from(&hv_b.columns(0, p_b));
        let q_u = m - p_u;
        let q_b = m - p_b;
        let mut h_y = DMatrix::zeros(k, q_u + q_b);
        h_y.view_mut((0, q_u), (k, q_b))
            .copy_from(&hv_b.columns(p_b, q_b));

        Ok(Self {
            geo,
            field_u,
            field_b,
            sigma_diag,
            hv_b,
            h_x,
            h_y,
            steps_per_obs,
        })
    }

    pub fn geo(&self) -> &GeoModel {
        &self.geo
    }

    pub fn forced_u(&self) -> usize {
        self.field_u.forced
    }

    pub fn forced_b(&self) -> usize {
        self.field_b.forced
    }

    /// Retained noise eigenvalues of both fields.
    pub fn noise_eigenvalues(&self) -> (DVector<f64>, DVector<f64>) {
        (
            self.field_u.theta.rows(0, self.field_u.forced).into_owned(),
            self.field_b.theta.rows(0, self.field_b.forced).into_owned(),
        )
    }

    fn m(&self) -> usize {
        self.geo.interior_dim()
    }

    /// Splits `(x, y)` into the per-field basis coefficient vectors.
    fn coefficients(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let m = self.m();
        let p_u = self.field_u.forced;
        let p_b = self.field_b.forced;
        let mut w_u = DVector::zeros(m);
        let mut w_b = DVector::zeros(m);
        w_u.rows_mut(0, p_u).copy_from(&x.rows(0, p_u));
        w_u.rows_mut(p_u, m - p_u).copy_from(&y.rows(0, m - p_u));
        w_b.rows_mut(0, p_b).copy_from(&x.rows(p_u, p_b));
        w_b.rows_mut(p_b, m - p_b)
            .copy_from(&y.rows(m - p_u, m - p_b));
        (w_u, w_b)
    }

    fn from_coefficients(&self, w_u: &DVector<f64>, w_b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let p_u = self.field_u.forced;
        let p_b = self.field_b.forced;
        let m = self.m();
        let mut x = DVector::zeros(p_u + p_b);
        let mut y = DVector::zeros(2 * m - p_u - p_b);
        x.rows_mut(0, p_u).copy_from(&w_u.rows(0, p_u));
        x.rows_mut(p_u, p_b).copy_from(&w_b.rows(0, p_b));
        y.rows_mut(0, m - p_u).copy_from(&w_u.rows(p_u, m - p_u));
        y.rows_mut(m - p_u, m - p_b)
            .copy_from(&w_b.rows(p_b, m - p_b));
        (x, y)
    }

    /// Physical fields from transformed coordinates.
    pub fn to_fields(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (w_u, w_b) = self.coefficients(x, y);
        (&self.field_u.v * w_u, &self.field_b.v * w_b)
    }

    /// Transformed coordinates from physical fields.
    pub fn from_fields(&self, u: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let w_u = &self.field_u.v_inv * u;
        let w_b = &self.field_b.v_inv * b;
        self.from_coefficients(&w_u, &w_b)
    }

    /// Deterministic transformed step: `w' = V'(M rhs)` per field. The
    /// implicit diffusion solve is absorbed by the basis.
    fn deterministic_step(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (u, b) = self.to_fields(x, y);
        let (rhs_u, rhs_b) = self.geo.explicit_rhs(&u, &b, true, true);
        let m = self.m();
        let mass = &self.geo.mass;
        let lin_u = DVector::from_fn(m, |i, _| mass[i] * rhs_u[i]);
        let lin_b = DVector::from_fn(m, |i, _| mass[i] * rhs_b[i]);
        let w_u = self.field_u.v.tr_mul(&lin_u);
        let w_b = self.field_b.v.tr_mul(&lin_b);
        (w_u, w_b)
    }
}

impl PartialNoiseModel for GeoPartialModel {
    fn forced_dim(&self) -> usize {
        self.field_u.forced + self.field_b.forced
    }

    fn unforced_dim(&self) -> usize {
        2 * self.m() - self.forced_dim()
    }

    fn obs_dim(&self) -> usize {
        self.geo.config().obs_count
    }

    fn steps_per_obs(&self) -> usize {
        self.steps_per_obs
    }

    fn forced_drift(&self, x: &DVector<f64>, y: &DVector<f64>, _step: usize) -> DVector<f64> {
        let (w_u, w_b) = self.deterministic_step(x, y);
        let (x_next, _) = self.from_coefficients(&w_u, &w_b);
        x_next
    }

    fn unforced_next(&self, x: &DVector<f64>, y: &DVector<f64>, _step: usize) -> DVector<f64> {
        let (w_u, w_b) = self.deterministic_step(x, y);
        let (_, y_next) = self.from_coefficients(&w_u, &w_b);
        y_next
    }

    fn forced_noise_diag(&self) -> &DVector<f64> {
        &self.sigma_diag
    }

    fn observe(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let (_, w_b) = self.coefficients(x, y);
        &self.hv_b * w_b + self.geo.obs_offset()
    }

    fn obs_noise(&self) -> &Covariance {
        self.geo.obs_noise()
    }

    fn observation_is_affine(&self) -> bool {
        true
    }

    fn obs_jacobians(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.h_x.clone(), self.h_y.clone())
    }

    fn step_jacobians(&self, x: &DVector<f64>, y: &DVector<f64>, _step: usize) -> StepJacobians {
        let m = self.m();
        let delta = self.geo.config().delta;
        let (u, b) = self.to_fields(x, y);
        let du = &self.geo.d_int * &u;
        let db = &self.geo.d_int * &b + &self.geo.bnd_dx;
        let mass = &self.geo.mass;

        // physical Jacobian blocks times the basis, assembled as row-scaled
        // combinations of V and D V (one dense product per block)
        let scale_rows = |src: &DMatrix<f64>, d: &DVector<f64>| -> DMatrix<f64> {
            let mut out = src.clone();
            for i in 0..m {
                let s = d[i];
                for j in 0..m {
                    out[(i, j)] *= s;
                }
            }
            out
        };
        let v_u = &self.field_u.v;
        let v_b = &self.field_b.v;
        let dv_u = &self.field_u.dv;
        let dv_b = &self.field_b.dv;

        let md = |extra: &DVector<f64>| DVector::from_fn(m, |i, _| mass[i] * extra[i]);
        let mass_du = md(&du);
        let mass_db = md(&db);
        let mass_u = DVector::from_fn(m, |i, _| mass[i] * u[i]);
        let mass_b = DVector::from_fn(m, |i, _| mass[i] * b[i]);

        // d(M rhs_u)/du = M - delta (M diag(du) + M diag(u) D)
        let t_uu = {
            let mut t = scale_rows(v_u, &DVector::from_fn(m, |i, _| mass[i]));
            t -= delta * (scale_rows(v_u, &mass_du) + scale_rows(dv_u, &mass_u));
            t
        };
        // d(M rhs_u)/db = delta (M diag(db) + M diag(b) D)
        let t_ub = delta * (scale_rows(v_b, &mass_db) + scale_rows(dv_b, &mass_b));
        // d(M rhs_b)/du = delta (M diag(b) D - M diag(db))
        let t_bu = delta * (scale_rows(dv_u, &mass_b) - scale_rows(v_u, &mass_db));
        // d(M rhs_b)/db = M + delta (M diag(du) - M diag(u) D)
        let t_bb = {
            let mut t = scale_rows(v_b, &DVector::from_fn(m, |i, _| mass[i]));
            t += delta * (scale_rows(v_b, &mass_du) - scale_rows(dv_b, &mass_u));
            t
        };

        let j_uu = v_u.tr_mul(&t_uu);
        let j_ub = v_u.tr_mul(&t_ub);
        let j_bu = v_b.tr_mul(&t_bu);
        let j_bb = v_b.tr_mul(&t_bb);

        // reorder the per-field blocks into the (x, y) layout
        let p_u = self.field_u.forced;
        let p_b = self.field_b.forced;
        let q_u = m - p_u;
        let q_b = m - p_b;
        let p = p_u + p_b;
        let q = q_u + q_b;
        let mut f_x = DMatrix::zeros(p, p);
        let mut f_y = DMatrix::zeros(p, q);
        let mut g_x = DMatrix::zeros(q, p);
        let mut g_y = DMatrix::zeros(q, q);

        let mut place = |jac: &DMatrix<f64>,
                         row_forced: bool,
                         col_forced: bool,
                         row_field_b: bool,
                         col_field_b: bool| {
            let (row_count, row_off, jac_row0) = match (row_forced, row_field_b) {
                (true, false) => (p_u, 0, 0),
                (true, true) => (p_b, p_u, 0),
                (false, false) => (q_u, 0, p_u),
                (false, true) => (q_b, q_u, p_b),
            };
            let (col_count, col_off, jac_col0) = match (col_forced, col_field_b) {
                (true, false) => (p_u, 0, 0),
                (true, true) => (p_b, p_u, 0),
                (false, false) => (q_u, 0, p_u),
                (false, true) => (q_b, q_u, p_b),
            };
            let view = jac.view((jac_row0, jac_col0), (row_count, col_count));
            match (row_forced, col_forced) {
                (true, true) => f_x
                    .view_mut((row_off, col_off), (row_count, col_count))
                    .copy_from(&view),
                (true, false) => f_y
                    .view_mut((row_off, col_off), (row_count, col_count))
                    .copy_from(&view),
                (false, true) => g_x
                    .view_mut((row_off, col_off), (row_count, col_count))
                    .copy_from(&view),
                (false, false) => g_y
                    .view_mut((row_off, col_off), (row_count, col_count))
                    .copy_from(&view),
            }
        };

        for (jac, row_b, col_b) in [
            (&j_uu, false, false),
            (&j_ub, false, true),
            (&j_bu, true, false),
            (&j_bb, true, true),
        ] {
            for row_forced in [true, false] {
                for col_forced in [true, false] {
                    place(jac, row_forced, col_forced, row_b, col_b);
                }
            }
        }

        StepJacobians { f_x, f_y, g_x, g_y }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoConfig, ModeDraw};
    use crate::linalg::central_difference_jacobian;
    use crate::rng;
    use approx::assert_abs_diff_eq;

    fn small_model(order: usize) -> GeoPartialModel {
        let cfg = GeoConfig {
            order,
            cutoff: 3,
            obs_count: 5,
            ..GeoConfig::default()
        };
        GeoPartialModel::new(GeoModel::new(cfg).unwrap(), 2).unwrap()
    }

    #[test]
    fn pencil_diagonalizes_both_operators() {
        let model = small_model(14);
        let geo = model.geo();
        // V' A V = I
        let v = &model.field_b.v;
        let gram = v.tr_mul(&(geo.lhs_b() * v));
        let m = geo.interior_dim();
        assert!((gram - DMatrix::identity(m, m)).amax() < 1e-8);
        // V' Sigma V = diag(theta)
        let diag = v.tr_mul(&(geo.sigma_b() * v));
        for i in 0..m {
            for j in 0..m {
                let expected = if i == j { model.field_b.theta[i] } else { 0.0 };
                assert!((diag[(i, j)] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forced_rank_counts_both_mode_families() {
        // cutoff modes of each family per field: numerical rank 2 * cutoff
        let model = small_model(16);
        assert_eq!(model.forced_u(), 6);
        assert_eq!(model.forced_b(), 6);
        assert_eq!(model.forced_dim(), 12);
    }

    #[test]
    fn zero_amplitude_field_has_no_forced_directions() {
        let cfg = GeoConfig {
            order: 12,
            cutoff: 3,
            obs_count: 5,
            g_u: 0.0,
            ..GeoConfig::default()
        };
        let model = GeoPartialModel::new(GeoModel::new(cfg).unwrap(), 1).unwrap();
        assert_eq!(model.forced_u(), 0);
        assert!(model.forced_b() > 0);
    }

    #[test]
    fn round_trip_through_the_basis() {
        let model = small_model(12);
        let m = model.m();
        let u = DVector::from_fn(m, |i, _| (i as f64 * 0.37).sin());
        let b = DVector::from_fn(m, |i, _| (i as f64 * 0.71).cos());
        let (x, y) = model.from_fields(&u, &b);
        let (u2, b2) = model.to_fields(&x, &y);
        assert!((u2 - u).amax() < 1e-10);
        assert!((b2 - b).amax() < 1e-10);
    }

    #[test]
    fn transformed_step_matches_physical_step() {
        let model = small_model(12);
        let geo = model.geo();
        let (u0, b0) = geo.initial_mean();
        let (x, y) = model.from_fields(&u0, &b0);

        // deterministic comparison
        let zero = DVector::zeros(geo.interior_dim());
        let (u1, b1) = geo.step(&u0, &b0, &zero, &zero).unwrap();
        let x1 = model.forced_drift(&x, &y, 0);
        let y1 = model.unforced_next(&x, &y, 0);
        let (u1t, b1t) = model.to_fields(&x1, &y1);
        assert!((u1t - &u1).amax() < 1e-9);
        assert!((b1t - &b1).amax() < 1e-9);

        // noisy comparison: physical forcing dW maps to V' dW in the basis
        let mut r = rng::stream(3, &[9]);
        let draw = ModeDraw::sample(geo.config().cutoff, &mut r);
        let (fu, fb) = geo.forcing_from_draw(&draw);
        let (u2, b2) = geo.step(&u0, &b0, &fu, &fb).unwrap();
        let wu_noise = model.field_u.v.tr_mul(&fu);
        let wb_noise = model.field_b.v.tr_mul(&fb);
        let (nx, ny) = model.from_coefficients(&wu_noise, &wb_noise);
        let x2 = x1 + &nx;
        let y2 = y1 + &ny;
        let (u2t, b2t) = model.to_fields(&x2, &y2);
        assert!((u2t - &u2).amax() < 1e-9);
        assert!((b2t - &b2).amax() < 1e-9);
        // the noise is (numerically) confined to the forced directions
        assert!(ny.amax() < 1e-8 * nx.amax());
    }

    #[test]
    fn observation_matches_physical_interpolation() {
        let model = small_model(12);
        let geo = model.geo();
        let (u0, b0) = geo.initial_mean();
        let (x, y) = model.from_fields(&u0, &b0);
        let via_transform = model.observe(&x, &y);
        let direct = geo.observe_b(&b0);
        assert!((via_transform - direct).amax() < 1e-10);
    }

    #[test]
    fn step_jacobians_match_finite_differences() {
        let model = small_model(10);
        let geo = model.geo();
        let (u0, b0) = geo.initial_mean();
        let (x, y) = model.from_fields(&u0, &b0);
        let jac = model.step_jacobians(&x, &y, 0);
        let p = model.forced_dim();
        let q = model.unforced_dim();

        let fd_fx = central_difference_jacobian(|v| model.forced_drift(v, &y, 0), &x, p);
        let fd_fy = central_difference_jacobian(|v| model.forced_drift(&x, v, 0), &y, p);
        let fd_gx = central_difference_jacobian(|v| model.unforced_next(v, &y, 0), &x, q);
        let fd_gy = central_difference_jacobian(|v| model.unforced_next(&x, v, 0), &y, q);
        let scale = fd_gy.amax().max(fd_fx.amax());
        assert!((jac.f_x - fd_fx).amax() / scale < 1e-7);
        assert!((jac.f_y - fd_fy).amax() / scale < 1e-7);
        assert!((jac.g_x - fd_gx).amax() / scale < 1e-7);
        assert!((jac.g_y - fd_gy).amax() / scale < 1e-7);
    }

    #[test]
    fn forced_noise_diagonal_is_positive_descending_per_field() {
        let model = small_model(14);
        let sigma = model.forced_noise_diag();
        assert!(sigma.iter().all(|&v| v > 0.0));
        let p_u = model.forced_u();
        for w in sigma.as_slice()[..p_u].windows(2) {
            assert!(w[0] >= w[1]);
        }
        for w in sigma.as_slice()[p_u..].windows(2) {
            assert!(w[0] >= w[1]);
        }
    }
}
