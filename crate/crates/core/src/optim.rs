//! Unconstrained minimizers used by the root searches.

use nalgebra::{DMatrix, DVector};

/// Outcome of a BFGS run.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the gradient infinity-norm drops below this.
    pub grad_tol: f64,
    /// Stop when the objective itself drops below this (root searches).
    pub value_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-12,
            value_tol: 1e-28,
        }
    }
}

/// Central finite-difference gradient with step `h` scaled per coordinate.
pub fn numeric_gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * x[i].abs().max(1.0);
            xp[i] = x[i] + step;
            let fp = f(&xp);
            xp[i] = x[i] - step;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Jacobian of a vector-valued function by central differences (rows = outputs).
pub fn numeric_jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: &F, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let m = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let step = h * x[j].abs().max(1.0);
        xp[j] = x[j] + step;
        let fp = f(&xp);
        xp[j] = x[j] - step;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..m {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * step);
        }
    }
    jac
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS with an Armijo backtracking line search.
///
/// `fg` returns the objective and its gradient at a point.
pub fn bfgs<F>(fg: F, x0: &[f64], opts: BfgsOptions) -> Minimum
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = fg(&x);
    // inverse Hessian approximation, row-major
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    let mut converged = false;
    let mut iter = 0;
    while iter < opts.max_iter {
        if !fx.is_finite() {
            break;
        }
        let gnorm = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if gnorm < opts.grad_tol || fx < opts.value_tol {
            converged = true;
            break;
        }
        iter += 1;
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&d, &g);
        if slope >= 0.0 {
            // not a descent direction: reset to steepest descent
            for v in h.iter_mut() {
                *v = 0.0;
            }
            for i in 0..n {
                h[i * n + i] = 1.0;
            }
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            let (fnew, gnew) = fg(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            // line search stalled: we are at numerical precision
            converged = gnorm < 1e-6 || fx < 1e-20;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &yv)).collect();
            let yhy = dot(&yv, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        x = xn;
        fx = fnew;
        g = gnew;
    }
    Minimum {
        x,
        value: fx,
        iterations: iter,
        converged,
    }
}

/// Minimize a sum of squared residuals with BFGS, using a finite-difference Jacobian.
pub fn least_squares<F>(residual: F, x0: &[f64], opts: BfgsOptions) -> Minimum
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let fg = |x: &[f64]| {
        let r = residual(x);
        let val: f64 = r.iter().map(|v| v * v).sum();
        let jac = numeric_jacobian(&residual, x, 1e-7);
        let grad = (0..x.len())
            .map(|j| {
                2.0 * r
                    .iter()
                    .enumerate()
                    .map(|(i, ri)| ri * jac[i][j])
                    .sum::<f64>()
            })
            .collect();
        (val, grad)
    };
    bfgs(fg, x0, opts)
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop once every residual is below this in absolute value.
    pub residual_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            residual_tol: 1e-14,
        }
    }
}

/// Levenberg-Marquardt on `sum r_i(x)^2` with a central-difference Jacobian.
///
/// `converged` reports whether every residual dropped below `residual_tol`.
pub fn levenberg_marquardt<F>(residual: F, x0: &[f64], opts: LmOptions) -> Minimum
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let sq = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = residual(&x);
    let mut mu = 1e-3;
    let mut iterations = 0;
    while iterations < opts.max_iter && !r.iter().all(|v| v.abs() < opts.residual_tol) {
        iterations += 1;
        let j = numeric_jacobian(&residual, &x, 1e-7);
        let jm = DMatrix::from_fn(r.len(), n, |a, b| j[a][b]);
        let jtj = jm.transpose() * &jm;
        let jtr = jm.transpose() * DVector::from_column_slice(&r);
        let scale = 1.0 + jtj.diagonal().max();
        let mut improved = false;
        for _ in 0..40 {
            let a = &jtj + DMatrix::identity(n, n) * (mu * scale);
            let Some(step) = a.lu().solve(&(-&jtr)) else {
                mu *= 10.0;
                continue;
            };
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(x, s)| x + s).collect();
            if cand.iter().any(|v| !v.is_finite()) {
                mu *= 10.0;
                continue;
            }
            let rc = residual(&cand);
            if rc.iter().all(|v| v.is_finite()) && sq(&rc) < sq(&r) {
                x = cand;
                r = rc;
                mu = (mu * 0.3).max(1e-15);
                improved = true;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let converged = r.iter().all(|v| v.abs() < opts.residual_tol);
    Minimum {
        value: sq(&r),
        x,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lm_solves_nonlinear_system() {
        // x^2 + y^2 = 4, x - y = 0
        let r = |x: &[f64]| vec![x[0] * x[0] + x[1] * x[1] - 4.0, x[0] - x[1]];
        let m = levenberg_marquardt(r, &[1.0, 0.5], LmOptions::default());
        assert!(m.converged);
        assert!((m.x[0] - 2f64.sqrt()).abs() < 1e-12 && (m.x[1] - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bfgs_solves_rosenbrock() {
        let fg = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            (f, g)
        };
        let m = bfgs(
            fg,
            &[-1.2, 1.0],
            BfgsOptions {
                max_iter: 2000,
                ..Default::default()
            },
        );
        assert!(
            (m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6,
            "{m:?}"
        );
    }

    #[test]
    fn least_squares_finds_linear_root() {
        let r = |x: &[f64]| vec![x[0] + x[1] - 3.0, x[0] - x[1] - 1.0, 2.0 * x[0] - 4.0];
        let m = least_squares(r, &[0.0, 0.0], BfgsOptions::default());
        assert!((m.x[0] - 2.0).abs() < 1e-8 && (m.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1];
        let g = numeric_gradient(&f, &[1.0, 2.0], 1e-6);
        assert!((g[0] - 8.0).abs() < 1e-6 && (g[1] - 3.0).abs() < 1e-6);
    }
}
