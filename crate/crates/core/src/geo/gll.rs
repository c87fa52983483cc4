//! Gauss-Lobatto-Legendre nodes, quadrature weights, collocation
//! differentiation matrices, and barycentric interpolation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Legendre polynomial value and derivative at `x` by the three-term
/// recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    if n == 0 {
        return (1.0, 0.0);
    }
    let (mut p_prev, mut p) = (1.0, x);
    for k in 1..n {
        let kf = k as f64;
        let p_next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        p_prev = p;
        p = p_next;
    }
    // derivative from the standard identity away from the endpoints
    let dp = if (1.0 - x * x).abs() > 1e-14 {
        n as f64 * (p_prev - x * p) / (1.0 - x * x)
    } else {
        let sign: f64 = if x > 0.0 { 1.0 } else { -1.0 };
        sign.powi(n as i32 + 1) * n as f64 * (n as f64 + 1.0) / 2.0
    };
    (p, dp)
}

/// GLL nodes (including the endpoints) and quadrature weights
/// `w_j = 2 / (N (N+1) P_N(x_j)^2)` for polynomial order `n >= 1`.
///
/// The rule integrates polynomials of degree up to `2N - 1` exactly.
pub fn nodes_and_weights(n: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    if n == 0 {
        return Err(Error::Config("polynomial order must be at least 1".into()));
    }
    let mut nodes = DVector::zeros(n + 1);
    nodes[0] = -1.0;
    nodes[n] = 1.0;
    // interior nodes: roots of P_N' by Newton from Chebyshev-Lobatto guesses
    for j in 1..n {
        let mut x = -(std::f64::consts::PI * j as f64 / n as f64).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            // P_N'' from the Legendre differential equation
            let ddp = (2.0 * x * dp - (n * (n + 1)) as f64 * p) / (1.0 - x * x);
            let step = dp / ddp;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        nodes[j] = x;
    }
    // enforce exact symmetry about the origin
    for j in 0..=(n / 2) {
        let s = 0.5 * (nodes[j] - nodes[n - j]);
        nodes[j] = s;
        nodes[n - j] = -s;
    }
    let weights = DVector::from_fn(n + 1, |j, _| {
        let (p, _) = legendre(n, nodes[j]);
        2.0 / ((n * (n + 1)) as f64 * p * p)
    });
    Ok((nodes, weights))
}

/// First-derivative collocation matrix on the GLL nodes:
/// `(D f)(x_i) = sum_j D[i, j] f(x_j)` differentiates the degree-N
/// interpolant exactly.
pub fn differentiation_matrix(nodes: &DVector<f64>) -> DMatrix<f64> {
    let np = nodes.len();
    let n = np - 1;
    let p_n: Vec<f64> = nodes.iter().map(|&x| legendre(n, x).0).collect();
    DMatrix::from_fn(np, np, |i, j| {
        if i == j {
            if i == 0 {
                -((n * (n + 1)) as f64) / 4.0
            } else if i == n {
                (n * (n + 1)) as f64 / 4.0
            } else {
                0.0
            }
        } else {
            (p_n[i] / p_n[j]) / (nodes[i] - nodes[j])
        }
    })
}

/// Barycentric weights of the GLL nodes: proportional to
/// `(-1)^j sqrt(w_j)`, which is exact for this node family.
fn barycentric_weights(quad_weights: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(quad_weights.len(), |j, _| {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        sign * quad_weights[j].sqrt()
    })
}

/// Interpolation matrix from nodal values to arbitrary points: row `i`
/// holds the Lagrange cardinal values at `points[i]`, so each row sums
/// to one.
pub fn interpolation_matrix(
    nodes: &DVector<f64>,
    quad_weights: &DVector<f64>,
    points: &[f64],
) -> DMatrix<f64> {
    let bary = barycentric_weights(quad_weights);
    let np = nodes.len();
    let mut out = DMatrix::zeros(points.len(), np);
    for (i, &s) in points.iter().enumerate() {
        // exact hit on a node gives the unit row
        if let Some(j) = (0..np).find(|&j| (s - nodes[j]).abs() < 1e-14) {
            out[(i, j)] = 1.0;
            continue;
        }
        let terms: Vec<f64> = (0..np).map(|j| bary[j] / (s - nodes[j])).collect();
        let total: f64 = terms.iter().sum();
        for j in 0..np {
            out[(i, j)] = terms[j] / total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn order_one_is_trapezoid() {
        let (nodes, weights) = nodes_and_weights(1).unwrap();
        assert_abs_diff_eq!(nodes[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(nodes[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(weights[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(weights[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn order_two_closed_form() {
        let (nodes, weights) = nodes_and_weights(2).unwrap();
        assert_abs_diff_eq!(nodes[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(weights[0], 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(weights[1], 4.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(weights[2], 1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn quadrature_exact_to_degree_2n_minus_1() {
        // N = 3 integrates x^4 over [-1, 1] exactly: 2/5
        let (nodes, weights) = nodes_and_weights(3).unwrap();
        let integral: f64 = nodes
            .iter()
            .zip(weights.iter())
            .map(|(&x, &w)| w * x.powi(4))
            .sum();
        assert_abs_diff_eq!(integral, 0.4, epsilon = 1e-14);
        // and the odd monomial of degree 2N - 1 vanishes
        let odd: f64 = nodes
            .iter()
            .zip(weights.iter())
            .map(|(&x, &w)| w * x.powi(5))
            .sum();
        assert_abs_diff_eq!(odd, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn quadrature_monomials_high_order() {
        let n = 12;
        let (nodes, weights) = nodes_and_weights(n).unwrap();
        for d in 0..(2 * n - 1) {
            let exact = if d % 2 == 0 { 2.0 / (d as f64 + 1.0) } else { 0.0 };
            let num: f64 = nodes
                .iter()
                .zip(weights.iter())
                .map(|(&x, &w)| w * x.powi(d as i32))
                .sum();
            assert!(
                (num - exact).abs() < 1e-12,
                "degree {d}: {num} vs {exact}"
            );
        }
    }

    #[test]
    fn weights_sum_to_two_and_nodes_symmetric() {
        for n in [4usize, 9, 16, 33] {
            let (nodes, weights) = nodes_and_weights(n).unwrap();
            assert_abs_diff_eq!(weights.sum(), 2.0, epsilon = 1e-12);
            for j in 0..=n {
                assert_abs_diff_eq!(nodes[j], -nodes[n - j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn derivative_matrix_exact_on_polynomials() {
        let n = 8;
        let (nodes, _) = nodes_and_weights(n).unwrap();
        let d = differentiation_matrix(&nodes);
        // p(x) = 3x^5 - 2x^2 + x, p'(x) = 15x^4 - 4x + 1
        let f = DVector::from_fn(n + 1, |j, _| {
            let x: f64 = nodes[j];
            3.0 * x.powi(5) - 2.0 * x * x + x
        });
        let df = &d * f;
        for j in 0..=n {
            let x: f64 = nodes[j];
            let exact = 15.0 * x.powi(4) - 4.0 * x + 1.0;
            assert_abs_diff_eq!(df[j], exact, epsilon = 1e-10);
        }
    }

    #[test]
    fn derivative_of_constant_vanishes() {
        let (nodes, _) = nodes_and_weights(6).unwrap();
        let d = differentiation_matrix(&nodes);
        let df = &d * DVector::from_element(7, 3.5);
        assert!(df.amax() < 1e-12);
    }

    #[test]
    fn second_derivative_of_square_is_two() {
        let (nodes, _) = nodes_and_weights(7).unwrap();
        let d = differentiation_matrix(&nodes);
        let d2 = &d * &d;
        let f = DVector::from_fn(8, |j, _| nodes[j] * nodes[j]);
        let ddf = &d2 * f;
        for v in ddf.iter() {
            assert_abs_diff_eq!(*v, 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn interpolation_rows_sum_to_one_and_hit_nodes() {
        let n = 9;
        let (nodes, weights) = nodes_and_weights(n).unwrap();
        let pts = [-0.93, -0.3, 0.11, 0.77, nodes[4]];
        let h = interpolation_matrix(&nodes, &weights, &pts);
        for i in 0..pts.len() {
            assert_abs_diff_eq!(h.row(i).sum(), 1.0, epsilon = 1e-12);
        }
        // the row at an exact node is the unit vector
        for j in 0..=n {
            if (pts[4] - nodes[j]).abs() < 1e-14 {
                assert_abs_diff_eq!(h[(4, j)], 1.0, epsilon = 1e-15);
            } else {
                assert_abs_diff_eq!(h[(4, j)], 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn interpolation_reproduces_polynomials() {
        let n = 10;
        let (nodes, weights) = nodes_and_weights(n).unwrap();
        let pts: Vec<f64> = (0..23).map(|i| -1.0 + 2.0 * i as f64 / 22.0).collect();
        let h = interpolation_matrix(&nodes, &weights, &pts);
        let poly = |x: f64| 0.5 * x.powi(6) - x.powi(3) + 0.25 * x - 2.0;
        let f = DVector::from_fn(n + 1, |j, _| poly(nodes[j]));
        let interp = &h * f;
        for (i, &s) in pts.iter().enumerate() {
            assert_abs_diff_eq!(interp[i], poly(s), epsilon = 1e-11);
        }
    }
}
