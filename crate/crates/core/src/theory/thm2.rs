use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::{norm, GeneralPositionReport, MatrixKind, Root, VerificationReport};
use crate::env_data::GaussianEnvSpecB;
use crate::linalg::{from_rows, numerical_rank, RANK_RTOL};
use crate::optim::{levenberg_marquardt, LmOptions};
use crate::{Error, Result};

struct Env {
    mu_c: DVector<f64>,
    sigma_c: DMatrix<f64>,
    mu_sp: DVector<f64>,
    sigma_sp: DMatrix<f64>,
    /// `Sigma_c w*`
    a: DVector<f64>,
    /// `Var(Y) = w*' Sigma_c w* + sigma_y^2`
    s: f64,
    /// `E[Y] = w*.mu_c`
    m: f64,
}

struct Params {
    d_c: usize,
    w_star: DVector<f64>,
    envs: Vec<Env>,
}

fn params(spec: &GaussianEnvSpecB) -> Result<Params> {
    spec.validate()?;
    let w_star = DVector::from_column_slice(&spec.w_c_star);
    let envs = spec
        .envs
        .iter()
        .map(|e| {
            let sigma_c = from_rows(&e.sigma_c);
            let mu_c = DVector::from_column_slice(&e.mu_c);
            let a = &sigma_c * &w_star;
            let s = w_star.dot(&a) + spec.sigma_y2;
            let m = w_star.dot(&mu_c);
            Env {
                mu_c,
                sigma_c,
                mu_sp: DVector::from_column_slice(&e.mu_sp),
                sigma_sp: from_rows(&e.sigma_sp),
                a,
                s,
                m,
            }
        })
        .collect();
    Ok(Params {
        d_c: spec.d_c(),
        w_star,
        envs,
    })
}

/// Slope, intercept and second-moment equalities, one entry per environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResiduals {
    /// `sigma_fy,i - t sigma_f,i^2`
    pub slope: Vec<f64>,
    /// `wbar.mu_c,i - (w_sp.mu_i) E[Y|e_i] + t2`
    pub intercept: Vec<f64>,
    /// `wbar' Sigma_c,i w* - Var_i(Y) (w_sp.mu_i) + t3`
    pub second_moment: Vec<f64>,
}

impl RegressionResiduals {
    pub fn norm(&self) -> f64 {
        norm(
            &self
                .slope
                .iter()
                .chain(&self.intercept)
                .chain(&self.second_moment)
                .copied()
                .collect::<Vec<_>>(),
        )
    }
}

fn split(p: &Params, w: &[f64]) -> (DVector<f64>, DVector<f64>) {
    (
        DVector::from_column_slice(&w[..p.d_c]),
        DVector::from_column_slice(&w[p.d_c..]),
    )
}

/// `(sigma_f^2, sigma_fy, w_sp.mu_sp)` for one environment.
fn moments(e: &Env, wc: &DVector<f64>, wsp: &DVector<f64>) -> (f64, f64, f64) {
    let u = wsp.dot(&e.mu_sp);
    let ca = wc.dot(&e.a);
    let var_f =
        wc.dot(&(&e.sigma_c * wc)) + 2.0 * ca * u + e.s * u * u + wsp.dot(&(&e.sigma_sp * wsp));
    let cov_fy = ca + e.s * u;
    (var_f, cov_fy, u)
}

/// Exact residuals of the regression calibration system at `(w, t, t2, t3)`,
/// with `wbar = w*/t - w_c`.
pub fn regression_residuals(
    spec: &GaussianEnvSpecB,
    w: &[f64],
    t: f64,
    t2: f64,
    t3: f64,
) -> Result<RegressionResiduals> {
    let p = params(spec)?;
    let d = p.d_c + spec.d_sp();
    if w.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: w.len(),
        });
    }
    if t == 0.0 {
        return Err(Error::InvalidArgument(
            "t = 0 is excluded: the slope of a calibrated regressor is nonzero".into(),
        ));
    }
    let (wc, wsp) = split(&p, w);
    let wbar = &p.w_star / t - &wc;
    let mut out = RegressionResiduals {
        slope: vec![],
        intercept: vec![],
        second_moment: vec![],
    };
    for e in &p.envs {
        let (var_f, cov_fy, u) = moments(e, &wc, &wsp);
        out.slope.push(cov_fy - t * var_f);
        out.intercept.push(wbar.dot(&e.mu_c) - u * e.m + t2);
        out.second_moment.push(wbar.dot(&e.a) - e.s * u + t3);
    }
    Ok(out)
}

/// Search residual over `x = [w, t, t t2, t t3]`: the intercept and
/// second-moment rows are multiplied by `t` so the map stays smooth at
/// `t = 0`, and `[t - 1, t2]` pins the calibrated (not merely invariant)
/// scale and offset.
fn search_residual(p: &Params, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let (t, tau2, tau3) = (x[n - 3], x[n - 2], x[n - 1]);
    let (wc, wsp) = split(p, &x[..n - 3]);
    let scaled = &p.w_star - &wc * t;
    let mut r = Vec::with_capacity(3 * p.envs.len() + 2);
    for e in &p.envs {
        let (var_f, cov_fy, u) = moments(e, &wc, &wsp);
        r.push(cov_fy - t * var_f);
        r.push(scaled.dot(&e.mu_c) - t * u * e.m + tau2);
        r.push(scaled.dot(&e.a) - t * e.s * u + tau3);
    }
    r.push(t - 1.0);
    r.push(tau2);
    r
}

/// Rows `[mu_c,i', E[Y|e_i] mu_i', 1]`.
pub fn regression_m(spec: &GaussianEnvSpecB) -> Result<DMatrix<f64>> {
    let p = params(spec)?;
    let rows: Vec<Vec<f64>> = p
        .envs
        .iter()
        .map(|e| {
            e.mu_c
                .iter()
                .copied()
                .chain(e.mu_sp.iter().map(|v| e.m * v))
                .chain([1.0])
                .collect()
        })
        .collect();
    Ok(from_rows(&rows))
}

/// Rows `[w*' Sigma_c,i - (s_i / m_i) mu_c,i', -s_i / m_i, 1]` with
/// `s_i = Var_i(Y)` and `m_i = E[Y|e_i]`.
pub fn regression_m2(spec: &GaussianEnvSpecB) -> Result<DMatrix<f64>> {
    let p = params(spec)?;
    let rows = p
        .envs
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.m == 0.0 {
                return Err(Error::Precondition(format!(
                    "E[Y | e{i}] = 0: M2 is undefined"
                )));
            }
            let c = e.s / e.m;
            Ok(e.a
                .iter()
                .zip(e.mu_c.iter())
                .map(|(a, mu)| a - c * mu)
                .chain([-c, 1.0])
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(from_rows(&rows))
}

fn rank_report(matrix: MatrixKind, m: &DMatrix<f64>, required: usize) -> GeneralPositionReport {
    let rank = numerical_rank(m, RANK_RTOL);
    let passes = rank >= required && m.nrows() >= required;
    GeneralPositionReport {
        matrix,
        rank,
        required,
        passes,
        probe_points: vec![],
        reason: (!passes).then(|| format!("rank {rank} < {required}")),
    }
}

/// Preconditions, rank reports and the overall verdict. The theorem needs
/// nonzero, non-constant `E[Y|e_i]` and either
/// (a) `k > max(d_c + 2, d_sp)`, `M2` full rank, spurious means spanning; or
/// (b) `k > d_c + d_sp + 1` and `M` full rank.
pub fn theorem2_preconditions(
    spec: &GaussianEnvSpecB,
) -> Result<(BTreeMap<String, bool>, Vec<GeneralPositionReport>, bool)> {
    let p = params(spec)?;
    let (d_c, d_sp, k) = (spec.d_c(), spec.d_sp(), spec.k());
    let ms: Vec<f64> = p.envs.iter().map(|e| e.m).collect();
    let scale = ms.iter().fold(0.0f64, |a, m| a.max(m.abs())).max(1e-300);
    let nonzero = ms.iter().all(|m| m.abs() > 1e-12 * scale);
    let lo = ms.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let distinct = hi - lo > 1e-9 * scale;
    let mut checks = Vec::new();
    let m2_ok = if nonzero {
        let r = rank_report(MatrixKind::RegressionM2, &regression_m2(spec)?, d_c + 2);
        let ok = r.passes;
        checks.push(r);
        ok
    } else {
        false
    };
    let m = rank_report(
        MatrixKind::RegressionM,
        &regression_m(spec)?,
        d_c + d_sp + 1,
    );
    let m_ok = m.passes;
    checks.push(m);
    let sp_rows: Vec<Vec<f64>> = spec.envs.iter().map(|e| e.mu_sp.clone()).collect();
    let span = numerical_rank(&from_rows(&sp_rows), RANK_RTOL) == d_sp;
    let mut pre = BTreeMap::new();
    let k_a = k > (d_c + 2).max(d_sp);
    let k_b = k > d_c + d_sp + 1;
    pre.insert("nonzero_mean_targets".into(), nonzero);
    pre.insert("distinct_mean_targets".into(), distinct);
    pre.insert("k_gt_max_dc_plus_2_dsp".into(), k_a);
    pre.insert("m2_full_rank".into(), m2_ok);
    pre.insert("spurious_means_span".into(), span);
    pre.insert("k_gt_dc_plus_dsp_plus_1".into(), k_b);
    pre.insert("m_full_rank".into(), m_ok);
    let ok = nonzero && distinct && ((k_a && m2_ok && span) || (k_b && m_ok));
    Ok((pre, checks, ok))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm2Options {
    pub starts: usize,
    pub seed: u64,
}

impl Default for Thm2Options {
    fn default() -> Self {
        Self {
            starts: 50,
            seed: 0,
        }
    }
}

/// Multi-start root search of the regression calibration system.
///
/// Passes when the preconditions hold, at least one start reaches a root
/// (residual below `1e-10`), and every root has `|w_c - w*| / |w*| < 1e-3`
/// and `|w_sp| < 1e-3`.
pub fn verify_theorem2(spec: &GaussianEnvSpecB, opts: &Thm2Options) -> Result<VerificationReport> {
    let (preconditions, rank_checks, ok) = theorem2_preconditions(spec)?;
    let mut report = VerificationReport {
        theorem: "theorem2".into(),
        preconditions,
        rank_checks,
        best_root: None,
        spurious_norm: None,
        passes: false,
        details: BTreeMap::new(),
        notes: Vec::new(),
    };
    if !ok {
        let failed: Vec<&str> = report
            .preconditions
            .iter()
            .filter(|(_, v)| !**v)
            .map(|(k, _)| k.as_str())
            .collect();
        report.notes.push(format!(
            "refused: failed preconditions {}",
            failed.join(", ")
        ));
        if !report.preconditions["k_gt_max_dc_plus_2_dsp"]
            && !report.preconditions["k_gt_dc_plus_dsp_plus_1"]
        {
            report
                .notes
                .push("insufficient number of environments".into());
        }
        return Ok(report);
    }
    let p = params(spec)?;
    let d = p.d_c + spec.d_sp();
    let w_norm = p.w_star.norm();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<Root> = None;
    let (mut roots, mut worst_c, mut worst_sp) = (0usize, 0.0f64, 0.0f64);
    for _ in 0..opts.starts.max(1) {
        let mut x0: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        x0.push(rng.random_range(0.5..1.5));
        x0.push(rng.sample(StandardNormal));
        x0.push(rng.sample(StandardNormal));
        let m = levenberg_marquardt(
            |x: &[f64]| search_residual(&p, x),
            &x0,
            LmOptions {
                max_iter: 300,
                residual_tol: 1e-15,
            },
        );
        let t = m.x[d];
        let residual = m.value.sqrt();
        let w = m.x[..d].to_vec();
        if residual < 1e-10 {
            roots += 1;
            let rel = (DVector::from_column_slice(&w[..p.d_c]) - &p.w_star).norm() / w_norm;
            worst_c = worst_c.max(rel);
            worst_sp = worst_sp.max(norm(&w[p.d_c..]));
        }
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            let (t2, t3) = if t != 0.0 {
                (Some(m.x[d + 1] / t), Some(m.x[d + 2] / t))
            } else {
                (None, None)
            };
            best = Some(Root {
                w,
                t,
                residual,
                t2,
                t3,
            });
        }
    }
    let best = best.expect("at least one start");
    report.details.insert("roots".into(), roots as f64);
    report
        .details
        .insert("max_causal_rel_error".into(), worst_c);
    report.details.insert("max_spurious_norm".into(), worst_sp);
    report.spurious_norm = Some(norm(&best.w[p.d_c..]));
    report.passes = roots > 0 && worst_c < 1e-3 && worst_sp < 1e-3;
    report.best_root = Some(best);
    Ok(report)
}
