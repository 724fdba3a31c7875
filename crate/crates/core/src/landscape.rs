//! Exact population penalties for odd classifiers on Two-Bit environments.
//!
//! A Two-Bit environment `(alpha, beta)` draws `Y` uniformly from `{-1, +1}`
//! and sets `X1 = Y` flipped with probability `alpha`, `X2 = Y` flipped with
//! probability `beta`. The feature whose flip rate is shared by all
//! environments is the invariant one.
//!
//! An odd classifier satisfies `f(-x) = 1 - f(x)` and is fixed by two values:
//! `p1 = f(1, 1)` and `p2 = f` on the pattern that disagrees with `(1, 1)` in
//! the spurious coordinate. The diagonal `p1 = p2` therefore holds the
//! classifiers that ignore the spurious feature.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::env_data::TwoBitEnvSpec;
use crate::metrics::{mmce_population, sigmoid, KernelSpec};
use crate::optim::{levenberg_marquardt, LmOptions};
use crate::{Error, Result};

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` before taking logs.
pub const PROB_CLIP: f64 = 1e-9;

/// Grid side length used for the penalty landscape.
pub const DEFAULT_GRID: usize = 401;

/// `(x1, x2, y in {0,1}, probability)` for all eight outcomes.
pub fn outcome_table(spec: &TwoBitEnvSpec) -> [(f64, f64, f64, f64); 8] {
    let mut out = [(0.0, 0.0, 0.0, 0.0); 8];
    let mut k = 0;
    for ys in [1.0, -1.0] {
        for flip1 in [false, true] {
            for flip2 in [false, true] {
                let p1 = if flip1 { spec.alpha } else { 1.0 - spec.alpha };
                let p2 = if flip2 { spec.beta } else { 1.0 - spec.beta };
                let x1 = if flip1 { -ys } else { ys };
                let x2 = if flip2 { -ys } else { ys };
                out[k] = (x1, x2, if ys > 0.0 { 1.0 } else { 0.0 }, 0.5 * p1 * p2);
                k += 1;
            }
        }
    }
    out
}

/// Index (0 or 1) of the feature whose flip probability is identical in
/// every environment. When both are shared, feature 0 is reported.
pub fn invariant_feature(envs: &[TwoBitEnvSpec]) -> Result<usize> {
    let first = envs.first().ok_or(Error::Empty("no environments"))?;
    if envs.iter().all(|e| e.alpha == first.alpha) {
        Ok(0)
    } else if envs.iter().all(|e| e.beta == first.beta) {
        Ok(1)
    } else {
        Err(Error::Precondition(
            "no feature has the same flip probability in every environment".into(),
        ))
    }
}

/// Odd classifier on `{-1, +1}^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OddClassifier {
    pub p1: f64,
    pub p2: f64,
    pub invariant: usize,
}

impl OddClassifier {
    /// `P(Y = 1 | x)`.
    pub fn prob(&self, x1: f64, x2: f64) -> f64 {
        let (inv, sp) = if self.invariant == 0 {
            (x1, x2)
        } else {
            (x2, x1)
        };
        // (inv, sp) == (1, 1) -> p1 ; (1, -1) -> p2 ; odd extension otherwise
        let base = if inv * sp > 0.0 { self.p1 } else { self.p2 };
        if inv > 0.0 {
            base
        } else {
            1.0 - base
        }
    }
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Population cross-entropy.
pub fn population_loss(spec: &TwoBitEnvSpec, f: &OddClassifier) -> f64 {
    outcome_table(spec)
        .iter()
        .map(|&(x1, x2, y, p)| {
            let q = clip(f.prob(x1, x2));
            -p * (y * q.ln() + (1.0 - y) * (1.0 - q).ln())
        })
        .sum()
}

/// Population derivative of the cross-entropy under logit scaling at 1.
pub fn population_irmv1_derivative(spec: &TwoBitEnvSpec, f: &OddClassifier) -> f64 {
    outcome_table(spec)
        .iter()
        .map(|&(x1, x2, y, p)| {
            let q = clip(f.prob(x1, x2));
            p * (q - y) * (q / (1.0 - q)).ln()
        })
        .sum()
}

pub fn population_mmce(spec: &TwoBitEnvSpec, f: &OddClassifier, kernel: &KernelSpec) -> f64 {
    let outcomes: Vec<(f64, f64, f64)> = outcome_table(spec)
        .iter()
        .map(|&(x1, x2, y, p)| (f.prob(x1, x2), y, p))
        .collect();
    mmce_population(&outcomes, kernel)
}

/// Grid value `i` of `n`: `v = -1 + 2i/(n-1)` mapped to `p = (1 + v)/2`.
pub fn grid_value(i: usize, n: usize) -> f64 {
    let v = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
    0.5 * (1.0 + v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub i: usize,
    pub j: usize,
    pub p1: f64,
    pub p2: f64,
    /// Summed population cross-entropy over the environments.
    pub train_loss: f64,
    pub mmce: Vec<f64>,
    /// Squared population IRMv1 derivative per environment.
    pub irmv1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub grid: usize,
    pub invariant_feature: usize,
    pub envs: Vec<TwoBitEnvSpec>,
    /// Row-major over `(i, j)`.
    pub points: Vec<LandscapePoint>,
}

/// Train loss, per-environment MMCE and IRMv1 penalty on a `grid x grid`
/// lattice of odd classifiers, by exact enumeration of each environment's
/// joint distribution.
pub fn two_bit_population_penalties(
    envs: &[TwoBitEnvSpec],
    grid: usize,
    kernel: &KernelSpec,
) -> Result<Landscape> {
    if grid < 2 {
        return Err(Error::InvalidArgument(
            "grid needs at least 2 points per axis".into(),
        ));
    }
    for e in envs {
        e.validate()?;
    }
    let invariant = invariant_feature(envs)?;
    let mut points = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            let f = OddClassifier {
                p1: grid_value(i, grid),
                p2: grid_value(j, grid),
                invariant,
            };
            points.push(LandscapePoint {
                i,
                j,
                p1: f.p1,
                p2: f.p2,
                train_loss: envs.iter().map(|e| population_loss(e, &f)).sum(),
                mmce: envs
                    .iter()
                    .map(|e| population_mmce(e, &f, kernel))
                    .collect(),
                irmv1: envs
                    .iter()
                    .map(|e| population_irmv1_derivative(e, &f).powi(2))
                    .collect(),
            });
        }
    }
    Ok(Landscape {
        grid,
        invariant_feature: invariant,
        envs: envs.to_vec(),
        points,
    })
}

impl Landscape {
    /// CSV `p1,p2,train_loss,mmce_e1,..,irmv1_e1,..` (environments numbered from 1).
    pub fn to_csv(&self) -> String {
        let k = self.envs.len();
        let mut out = String::from("p1,p2,train_loss");
        for e in 1..=k {
            let _ = write!(out, ",mmce_e{e}");
        }
        for e in 1..=k {
            let _ = write!(out, ",irmv1_e{e}");
        }
        out.push('\n');
        for p in &self.points {
            let _ = write!(out, "{},{},{}", p.p1, p.p2, p.train_loss);
            for v in p.mmce.iter().chain(&p.irmv1) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Grid points where every environment's MMCE is below `tol`.
    pub fn common_mmce_zeros(&self, tol: f64) -> Vec<(usize, usize)> {
        self.points
            .iter()
            .filter(|p| p.mmce.iter().all(|&m| m < tol))
            .map(|p| (p.i, p.j))
            .collect()
    }
}

/// The classifier using only the invariant feature with its exact posterior.
pub fn invariant_optimum(envs: &[TwoBitEnvSpec]) -> Result<OddClassifier> {
    let inv = invariant_feature(envs)?;
    let delta = if inv == 0 {
        envs[0].alpha
    } else {
        envs[0].beta
    };
    Ok(OddClassifier {
        p1: 1.0 - delta,
        p2: 1.0 - delta,
        invariant: inv,
    })
}

/// Classifiers (as `(p1, p2)`) at which every environment's IRMv1 derivative
/// vanishes, found by Levenberg-Marquardt in logit coordinates from a 17 x 17
/// lattice of starts on `[-4, 4]^2`. Roots closer than `1e-6` in probability
/// are merged; a root is kept when every residual is below `1e-10`.
pub fn irmv1_common_zeros(envs: &[TwoBitEnvSpec]) -> Result<Vec<OddClassifier>> {
    let inv = invariant_feature(envs)?;
    let residual = |z: &[f64]| -> Vec<f64> {
        let f = OddClassifier {
            p1: sigmoid(z[0]),
            p2: sigmoid(z[1]),
            invariant: inv,
        };
        envs.iter()
            .map(|e| population_irmv1_derivative(e, &f))
            .collect()
    };
    let mut roots: Vec<OddClassifier> = Vec::new();
    for a in 0..17 {
        for b in 0..17 {
            let z0 = [-4.0 + 0.5 * a as f64, -4.0 + 0.5 * b as f64];
            let m = levenberg_marquardt(
                residual,
                &z0,
                LmOptions {
                    max_iter: 200,
                    residual_tol: 1e-13,
                },
            );
            if m.value.sqrt() < 1e-10 && m.x.iter().all(|v| v.abs() <= 40.0) {
                let z = m.x;
                let f = OddClassifier {
                    p1: sigmoid(z[0]),
                    p2: sigmoid(z[1]),
                    invariant: inv,
                };
                if !roots
                    .iter()
                    .any(|r| (r.p1 - f.p1).abs() < 1e-6 && (r.p2 - f.p2).abs() < 1e-6)
                {
                    roots.push(f);
                }
            }
        }
    }
    roots.sort_by(|a, b| a.p1.total_cmp(&b.p1).then(a.p2.total_cmp(&b.p2)));
    Ok(roots)
}
