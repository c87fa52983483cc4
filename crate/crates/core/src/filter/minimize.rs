//! Gradient descent with backtracking (Armijo) line search.
//!
//! Deliberately Hessian-free: the per-particle cost functions of the
//! partial-noise filter have awkward second derivatives, and the whole point
//! of the random-map construction is to avoid them.

use nalgebra::DVector;

/// Options for the descent loop.
#[derive(Clone, Debug)]
pub struct MinimizeOptions {
    /// Stop when the relative change in the cost falls below this. The
    /// filters default to 0.10: a crude minimum is enough for sampling and
    /// much cheaper than a tight one.
    pub tol: f64,
    /// Iteration cap.
    pub max_iter: usize,
    /// Secondary stop on the gradient norm (handles starts at the minimum).
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Backtracking shrink factor.
    pub shrink: f64,
    /// Initial step length.
    pub init_step: f64,
    /// Line-search abandon threshold.
    pub min_step: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            tol: 0.10,
            max_iter: 100,
            grad_tol: 1e-12,
            armijo_c: 1e-4,
            shrink: 0.5,
            init_step: 1.0,
            min_step: 1e-18,
        }
    }
}

impl MinimizeOptions {
    /// Tight settings for oracle comparisons in tests.
    pub fn tight(tol: f64, max_iter: usize) -> Self {
        Self {
            tol,
            max_iter,
            ..Self::default()
        }
    }
}

/// Result of a minimization: the located minimum value and position.
#[derive(Clone, Debug)]
pub struct MinimumRecord {
    /// Cost at `mu`.
    pub phi: f64,
    /// Argmin iterate.
    pub mu: DVector<f64>,
    /// Accepted descent steps.
    pub iterations: usize,
    /// False only when the cost or gradient became non-finite.
    pub converged: bool,
}

/// Minimizes `f` from `x0` by steepest descent with backtracking line
/// search. The cost never increases across accepted steps.
pub fn minimize_gradient_descent<F, G>(
    f: F,
    grad: G,
    x0: &DVector<f64>,
    opts: &MinimizeOptions,
) -> MinimumRecord
where
    F: Fn(&DVector<f64>) -> f64,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = x0.clone();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return MinimumRecord {
            phi: fx,
            mu: x,
            iterations: 0,
            converged: false,
        };
    }
    let mut iterations = 0usize;
    let mut converged = true;

    while iterations < opts.max_iter {
        let g = grad(&x);
        if !g.iter().all(|v| v.is_finite()) {
            converged = false;
            break;
        }
        let g_norm_sq = g.norm_squared();
        if g_norm_sq.sqrt() <= opts.grad_tol * (1.0 + fx.abs()) {
            break;
        }

        // backtracking line search
        let mut alpha = opts.init_step;
        let mut accepted = None;
        while alpha >= opts.min_step {
            let trial = &x - alpha * &g;
            let ft = f(&trial);
            if ft.is_finite() && ft <= fx - opts.armijo_c * alpha * g_norm_sq {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= opts.shrink;
        }
        let Some((trial, ft)) = accepted else {
            // no descent direction left at floating-point resolution
            break;
        };

        let rel_change = (fx - ft) / fx.abs().max(1e-300);
        x = trial;
        fx = ft;
        iterations += 1;
        if rel_change < opts.tol {
            break;
        }
    }

    MinimumRecord {
        phi: fx,
        mu: x,
        iterations,
        converged,
    }
}
