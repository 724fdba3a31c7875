use serde::{Deserialize, Serialize};

use super::isotonic::{distinct_points, pava};
use super::{Interp, MonotoneMap};
use crate::metrics::{check_predictions, PredictionSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustOptions {
    /// Subgradient iteration budget.
    pub max_iter: usize,
    /// Duality-gap and stability tolerance on the objective.
    pub tol: f64,
}

impl Default for RobustOptions {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-6,
        }
    }
}

/// Result of the worst-environment isotonic fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustFit {
    pub map: MonotoneMap,
    /// `max_e` mean squared error of the map on environment `e`.
    pub objective: f64,
    pub per_env: Vec<f64>,
    /// Certified lower bound on the optimal objective.
    pub lower_bound: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-environment sufficient statistics on the pooled knots.
struct Problem {
    knots: Vec<f64>,
    /// counts[e][j], sums[e][j]
    counts: Vec<Vec<f64>>,
    sums: Vec<Vec<f64>>,
    sq: Vec<f64>,
    sizes: Vec<f64>,
}

impl Problem {
    fn new(preds: &PredictionSet) -> Result<Self> {
        if preds.envs.is_empty() {
            return Err(Error::Empty(
                "robust calibration needs at least one environment",
            ));
        }
        for e in &preds.envs {
            check_predictions(&e.confidences, &e.labels)?;
            if e.confidences.is_empty() {
                return Err(Error::Empty(
                    "robust calibration needs nonempty environments",
                ));
            }
        }
        let (f, y) = preds.pooled();
        let (knots, _, _) = distinct_points(&f, &y);
        let k = preds.envs.len();
        let mut counts = vec![vec![0.0; knots.len()]; k];
        let mut sums = vec![vec![0.0; knots.len()]; k];
        let mut sq = vec![0.0; k];
        let mut sizes = vec![0.0; k];
        for (e, env) in preds.envs.iter().enumerate() {
            for (&f, &y) in env.confidences.iter().zip(&env.labels) {
                let j = knots.partition_point(|&x| x < f);
                counts[e][j] += 1.0;
                sums[e][j] += y;
                sq[e] += y * y;
            }
            sizes[e] = env.confidences.len() as f64;
        }
        Ok(Self {
            knots,
            counts,
            sums,
            sq,
            sizes,
        })
    }

    fn num_envs(&self) -> usize {
        self.sizes.len()
    }

    fn env_objective(&self, e: usize, z: &[f64]) -> f64 {
        let mut s = self.sq[e];
        for (j, &zj) in z.iter().enumerate() {
            s += self.counts[e][j] * zj * zj - 2.0 * self.sums[e][j] * zj;
        }
        (s / self.sizes[e]).max(0.0)
    }

    fn objectives(&self, z: &[f64]) -> Vec<f64> {
        (0..self.num_envs())
            .map(|e| self.env_objective(e, z))
            .collect()
    }

    /// Minimizer of `sum_e lambda_e F_e` over monotone `z` in `[0,1]`.
    fn weighted_fit(&self, lambda: &[f64]) -> Vec<f64> {
        let nk = self.knots.len();
        let mut w = vec![0.0; nk];
        let mut s = vec![0.0; nk];
        for (e, &l) in lambda.iter().enumerate() {
            let scale = l / self.sizes[e];
            for j in 0..nk {
                w[j] += scale * self.counts[e][j];
                s[j] += scale * self.sums[e][j];
            }
        }
        let t: Vec<f64> = s.iter().zip(&w).map(|(s, w)| s / w).collect();
        pava(&t, &w)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect()
    }

    fn pooled_fit(&self) -> Vec<f64> {
        let nk = self.knots.len();
        let w: Vec<f64> = (0..nk)
            .map(|j| self.counts.iter().map(|c| c[j]).sum())
            .collect();
        let s: Vec<f64> = (0..nk)
            .map(|j| self.sums.iter().map(|c| c[j]).sum())
            .collect();
        let t: Vec<f64> = s.iter().zip(&w).map(|(s, w)| s / w).collect();
        pava(&t, &w)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect()
    }
}

const LAMBDA_FLOOR: f64 = 1e-12;

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

struct Tracker {
    best_z: Vec<f64>,
    best_obj: f64,
    lower: f64,
}

impl Tracker {
    /// Records the primal value of `z` and, when `lambda` produced it, the dual value.
    fn observe(&mut self, p: &Problem, z: Vec<f64>, lambda: Option<&[f64]>) -> Vec<f64> {
        let f = p.objectives(&z);
        if let Some(l) = lambda {
            let total: f64 = l.iter().sum();
            let dual = l.iter().zip(&f).map(|(l, f)| l * f).sum::<f64>() / total;
            self.lower = self.lower.max(dual);
        }
        let obj = max_of(&f);
        if obj < self.best_obj {
            self.best_obj = obj;
            self.best_z = z;
        }
        f
    }
}

fn two_env_dual(p: &Problem, t: &mut Tracker) {
    let lam = |a: f64| [a.max(LAMBDA_FLOOR), (1.0 - a).max(LAMBDA_FLOOR)];
    // derivative of the concave dual in lambda_1 is F_1 - F_2
    let h = |t: &mut Tracker, a: f64| {
        let l = lam(a);
        let f = t.observe(p, p.weighted_fit(&l), Some(&l));
        f[0] - f[1]
    };
    if h(t, 0.0) <= 0.0 || h(t, 1.0) >= 0.0 {
        return;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(t, mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if t.best_obj - t.lower <= 0.0 {
            break;
        }
    }
}

fn multi_env_dual(p: &Problem, t: &mut Tracker, iters: usize) {
    let k = p.num_envs();
    let mut lambda = vec![1.0 / k as f64; k];
    for it in 0..iters {
        let f = t.observe(p, p.weighted_fit(&lambda), Some(&lambda));
        let eta = 5.0 / ((it + 1) as f64).sqrt();
        let fmax = max_of(&f);
        for (l, fe) in lambda.iter_mut().zip(&f) {
            *l *= (eta * (fe - fmax)).exp();
        }
        let total: f64 = lambda.iter().sum();
        for l in lambda.iter_mut() {
            *l = (*l / total).max(LAMBDA_FLOOR);
        }
    }
}

/// Monotone map minimizing the worst per-environment mean squared error
/// `max_e (1/N_e) sum_i (z(f_ei) - y_ei)^2` over nondecreasing `z` with values
/// in `[0,1]` on the pooled distinct confidences.
///
/// A dual pass (bisection for two environments, exponentiated gradient for
/// more) supplies a lower bound and a warm start; projected subgradient steps
/// with Polyak step length then refine the primal. The best iterate is
/// returned, so the objective never exceeds that of the pooled isotonic fit.
pub fn calibrate_robust(preds: &PredictionSet, opts: &RobustOptions) -> Result<RobustFit> {
    let p = Problem::new(preds)?;
    let k = p.num_envs();
    let mut t = Tracker {
        best_z: Vec::new(),
        best_obj: f64::INFINITY,
        lower: f64::NEG_INFINITY,
    };
    t.observe(&p, p.pooled_fit(), None);
    match k {
        1 => {
            t.observe(&p, p.weighted_fit(&[1.0]), Some(&[1.0]));
        }
        2 => two_env_dual(&p, &mut t),
        _ => multi_env_dual(&p, &mut t, 2000),
    }

    let mut iterations = 0;
    let mut converged = t.best_obj - t.lower <= opts.tol;
    if !converged {
        let mut z = t.best_z.clone();
        let mut last_check = t.best_obj;
        let unit = vec![1.0; z.len()];
        while iterations < opts.max_iter {
            iterations += 1;
            let f = p.objectives(&z);
            let e = (0..k).fold(0, |a, b| if f[b] > f[a] { b } else { a });
            let g: Vec<f64> = (0..z.len())
                .map(|j| 2.0 * (p.counts[e][j] * z[j] - p.sums[e][j]) / p.sizes[e])
                .collect();
            let gg: f64 = g.iter().map(|v| v * v).sum();
            if gg == 0.0 {
                // z minimizes the active environment's error, which is the maximum
                t.lower = t.lower.max(f[e]);
                break;
            }
            let step = (f[e] - t.lower).max(opts.tol) / gg;
            let moved: Vec<f64> = z.iter().zip(&g).map(|(z, g)| z - step * g).collect();
            z = pava(&moved, &unit)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect();
            t.observe(&p, z.clone(), None);
            if t.best_obj - t.lower <= opts.tol {
                break;
            }
            if iterations % 1000 == 0 {
                if last_check - t.best_obj < opts.tol {
                    converged = true;
                    break;
                }
                last_check = t.best_obj;
            }
        }
        converged = converged || t.best_obj - t.lower <= opts.tol;
    }

    let per_env = p.objectives(&t.best_z);
    let map = MonotoneMap::new(p.knots.clone(), t.best_z, Interp::Linear)?;
    Ok(RobustFit {
        map,
        objective: t.best_obj,
        per_env,
        lower_bound: t.lower.min(t.best_obj),
        iterations,
        converged,
    })
}
