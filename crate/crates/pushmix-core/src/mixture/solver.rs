//! Limited-memory BFGS minimizer with backtracking line search.
//!
//! The minimizer never returns a point worse than the start: the best
//! iterate seen is tracked and returned, which is what lets the EM loop
//! treat every inner solve as a non-decrease of its objective.

/// Inner-solver settings.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Stop when the max-norm of the gradient falls below this.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Number of curvature pairs kept.
    pub history: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            grad_tol: 1e-8,
            max_iter: 100,
            history: 7,
        }
    }
}

/// Outcome of one minimization.
#[derive(Debug, Clone, Copy)]
pub struct SolverStatus {
    /// Gradient tolerance was reached.
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// The returned point improves on the start point.
    pub improved: bool,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, &b| a.max(b.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `f`, which returns (value, gradient), starting from `x0`.
/// Returns the best point seen, its value, and a status.
pub fn minimize<F>(f: F, x0: &[f64], opts: &SolverOptions) -> (Vec<f64>, f64, SolverStatus)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut grad) = f(&x);
    let f0 = fx;
    let mut best_x = x.clone();
    let mut best_f = fx;

    // (s, y, rho) curvature pairs, newest last
    let mut pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        if inf_norm(&grad) <= opts.grad_tol {
            return (
                best_x,
                best_f,
                SolverStatus {
                    converged: true,
                    iterations: iter,
                    grad_norm: inf_norm(&grad),
                    improved: best_f < f0,
                },
            );
        }

        // two-loop recursion
        let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = vec![0.0; pairs.len()];
        for (idx, (s, y, rho)) in pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alphas[idx] = a;
            for (d, yi) in dir.iter_mut().zip(y) {
                *d -= a * yi;
            }
        }
        if let Some((s, y, _)) = pairs.last() {
            let gamma = dot(s, y) / dot(y, y).max(1e-300);
            for d in dir.iter_mut() {
                *d *= gamma;
            }
        }
        for (idx, (s, y, rho)) in pairs.iter().enumerate() {
            let b = rho * dot(y, &dir);
            for (d, si) in dir.iter_mut().zip(s) {
                *d += (alphas[idx] - b) * si;
            }
        }

        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            // not a descent direction: fall back to steepest descent
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
            pairs.clear();
        }

        // backtracking Armijo line search
        let mut step = if pairs.is_empty() {
            (1.0 / inf_norm(&dir).max(1e-12)).min(1.0)
        } else {
            1.0
        };
        let c1 = 1e-4;
        let mut accepted = false;
        let mut x_new = vec![0.0; n];
        let mut f_new = fx;
        let mut g_new = grad.clone();
        for _ in 0..40 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            let (fv, gv) = f(&x_new);
            if fv.is_finite() && fv <= fx + c1 * step * slope {
                f_new = fv;
                g_new = gv;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * inf_norm(&s).max(1e-300) * inf_norm(&y).max(1e-300) {
            if pairs.len() == opts.history {
                pairs.remove(0);
            }
            pairs.push((s, y, 1.0 / sy));
        }
        x = x_new;
        fx = f_new;
        grad = g_new;
        if fx < best_f {
            best_f = fx;
            best_x = x.clone();
        }
    }

    let grad_norm = inf_norm(&grad);
    (
        best_x,
        best_f,
        SolverStatus {
            converged: grad_norm <= opts.grad_tol,
            iterations,
            grad_norm,
            improved: best_f < f0,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn minimizes_quadratic() {
        let f = |x: &[f64]| {
            let v = (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2);
            (v, vec![2.0 * (x[0] - 3.0), 4.0 * (x[1] + 1.0)])
        };
        let (x, _, status) = minimize(f, &[0.0, 0.0], &SolverOptions::default());
        assert!(status.converged);
        assert_abs_diff_eq!(x[0], 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(x[1], -1.0, epsilon = 1e-6);
    }

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            (v, g)
        };
        let opts = SolverOptions {
            max_iter: 500,
            ..SolverOptions::default()
        };
        let (x, fx, _) = minimize(f, &[-1.2, 1.0], &opts);
        assert!(fx < 1e-10, "f = {fx}, x = {x:?}");
    }

    #[test]
    fn never_returns_worse_than_start() {
        // pathological oscillating objective; only care about the contract
        let f = |x: &[f64]| {
            let v = (x[0].sin() * 50.0).cos() + x[0].abs();
            (v, vec![1.0]) // deliberately wrong gradient
        };
        let (_, fv, _) = minimize(f, &[2.0], &SolverOptions::default());
        let (f0, _) = f(&[2.0]);
        assert!(fv <= f0);
    }

    #[test]
    fn converges_immediately_at_optimum() {
        let f = |x: &[f64]| (x[0] * x[0], vec![2.0 * x[0]]);
        let (x, _, status) = minimize(f, &[0.0], &SolverOptions::default());
        assert!(status.converged);
        assert_eq!(status.iterations, 0);
        assert_eq!(x, vec![0.0]);
    }
}
