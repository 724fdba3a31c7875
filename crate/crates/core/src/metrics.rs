//! Calibration and invariance metrics.
//!
//! All scores take binary labels in `{0, 1}` and confidences `f(x) = P(Y = 1 | x)`
//! in `[0, 1]`.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::{Error, Result};

/// Default number of equal-width reliability bins.
pub const DEFAULT_BINS: usize = 10;

/// Predictions of one model on one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvPredictions {
    pub env_id: String,
    pub confidences: Vec<f64>,
    pub labels: Vec<f64>,
}

impl EnvPredictions {
    pub fn new(env_id: impl Into<String>, confidences: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        check_predictions(&confidences, &labels)?;
        Ok(Self {
            env_id: env_id.into(),
            confidences,
            labels,
        })
    }
}

/// Per-environment predictions aligned with labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub envs: Vec<EnvPredictions>,
}

impl PredictionSet {
    pub fn new(envs: Vec<EnvPredictions>) -> Result<Self> {
        for e in &envs {
            check_predictions(&e.confidences, &e.labels)?;
        }
        Ok(Self { envs })
    }

    /// All environments concatenated.
    pub fn pooled(&self) -> (Vec<f64>, Vec<f64>) {
        let f = self
            .envs
            .iter()
            .flat_map(|e| e.confidences.iter().copied())
            .collect();
        let y = self
            .envs
            .iter()
            .flat_map(|e| e.labels.iter().copied())
            .collect();
        (f, y)
    }
}

pub(crate) fn check_predictions(conf: &[f64], labels: &[f64]) -> Result<()> {
    if conf.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            got: conf.len(),
        });
    }
    if let Some(f) = conf.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::InvalidArgument(format!(
            "confidence {f} outside [0,1]"
        )));
    }
    Ok(())
}

#[inline]
fn is_positive(y: f64) -> bool {
    y > 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean confidence of the members (0 for empty bins).
    pub conf: f64,
    /// Mean label of the members (0 for empty bins).
    pub acc: f64,
}

/// Equal-width reliability histogram over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<BinStats>,
    pub total: usize,
}

impl ReliabilityBins {
    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    /// `sum_b (n_b / N) |acc(b) - conf(b)|`; empty bins contribute nothing.
    pub fn ece(&self) -> f64 {
        let n = self.total as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n * (b.acc - b.conf).abs())
            .sum()
    }

    /// CSV with header `bin_lo,bin_hi,count,conf,acc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,conf,acc\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{},{},{}", b.lo, b.hi, b.count, b.conf, b.acc);
        }
        out
    }
}

/// Bin index of a confidence; `1.0` belongs to the last bin.
pub fn bin_index(f: f64, num_bins: usize) -> usize {
    ((f * num_bins as f64).floor() as usize).min(num_bins - 1)
}

pub fn reliability_bins(conf: &[f64], labels: &[f64], num_bins: usize) -> Result<ReliabilityBins> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("number of bins must be >= 1".into()));
    }
    if conf.is_empty() {
        return Err(Error::Empty(
            "reliability bins need at least one prediction",
        ));
    }
    check_predictions(conf, labels)?;
    let mut count = vec![0usize; num_bins];
    let mut sum_f = vec![0.0; num_bins];
    let mut sum_y = vec![0.0; num_bins];
    for (&f, &y) in conf.iter().zip(labels) {
        let b = bin_index(f, num_bins);
        count[b] += 1;
        sum_f[b] += f;
        sum_y[b] += if is_positive(y) { 1.0 } else { 0.0 };
    }
    let width = 1.0 / num_bins as f64;
    let bins = (0..num_bins)
        .map(|b| {
            let n = count[b];
            let (conf, acc) = if n > 0 {
                (sum_f[b] / n as f64, sum_y[b] / n as f64)
            } else {
                (0.0, 0.0)
            };
            BinStats {
                lo: b as f64 * width,
                hi: ((b + 1) as f64 * width).min(1.0),
                count: n,
                conf,
                acc,
            }
        })
        .collect();
    Ok(ReliabilityBins {
        bins,
        total: conf.len(),
    })
}

/// Expected calibration error with `num_bins` equal-width bins.
pub fn ece(conf: &[f64], labels: &[f64], num_bins: usize) -> Result<f64> {
    Ok(reliability_bins(conf, labels, num_bins)?.ece())
}

/// Brier score split into calibration and refinement terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrierDecomposition {
    pub brier: f64,
    pub cal: f64,
    #[serde(rename = "ref")]
    pub refinement: f64,
}

/// Groups predictions by exact value: `cal = (1/m) sum N_f (f - ybar_f)^2`,
/// `ref = (1/m) sum N_f ybar_f (1 - ybar_f)`.
pub fn brier_decomposition(conf: &[f64], labels: &[f64]) -> Result<BrierDecomposition> {
    if conf.is_empty() {
        return Err(Error::Empty("Brier score needs at least one prediction"));
    }
    check_predictions(conf, labels)?;
    let m = conf.len() as f64;
    let brier = conf
        .iter()
        .zip(labels)
        .map(|(f, y)| (f - y).powi(2))
        .sum::<f64>()
        / m;
    let mut groups: BTreeMap<u64, (f64, f64, f64)> = BTreeMap::new();
    for (&f, &y) in conf.iter().zip(labels) {
        // +0.0 and -0.0 are one prediction value
        let key = if f == 0.0 { 0u64 } else { f.to_bits() };
        let g = groups.entry(key).or_insert((f, 0.0, 0.0));
        g.1 += 1.0;
        g.2 += y;
    }
    let (mut cal, mut refinement) = (0.0, 0.0);
    for (f, n, sy) in groups.into_values() {
        let ybar = sy / n;
        cal += n * (f - ybar).powi(2);
        refinement += n * ybar * (1.0 - ybar);
    }
    Ok(BrierDecomposition {
        brier,
        cal: cal / m,
        refinement: refinement / m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
}

/// `k(r, r') = exp(-gamma (r - r')^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub gamma: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            kind: KernelKind::Rbf,
            gamma: 2.5,
        }
    }
}

impl KernelSpec {
    pub fn rbf(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "kernel bandwidth must be > 0, got {gamma}"
            )));
        }
        Ok(Self {
            kind: KernelKind::Rbf,
            gamma,
        })
    }

    #[inline]
    pub fn eval(&self, r: f64, s: f64) -> f64 {
        match self.kind {
            KernelKind::Rbf => (-self.gamma * (r - s) * (r - s)).exp(),
        }
    }
}

/// Confidence `max(f, 1 - f)` and correctness of the thresholded prediction
/// (class 1 iff `f >= 0.5`).
#[inline]
pub fn confidence_and_correctness(f: f64, y: f64) -> (f64, f64) {
    let r = f.max(1.0 - f);
    let c = if (f >= 0.5) == is_positive(y) {
        1.0
    } else {
        0.0
    };
    (r, c)
}

/// Distinct kernel centres with their summed weights, in ascending order.
fn group_by_value(r: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..r.len()).collect();
    idx.sort_by(|&a, &b| r[a].total_cmp(&r[b]).then(a.cmp(&b)));
    let mut centres: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for i in idx {
        match centres.last() {
            Some(&last) if last == r[i] => *weights.last_mut().unwrap() += w[i],
            _ => {
                centres.push(r[i]);
                weights.push(w[i]);
            }
        }
    }
    (centres, weights)
}

/// `sum_{i,j} w_i w_j k(r_i, r_j)`, summed over distinct values of `r` in
/// ascending order (diagonal first, then `2 *` the strict upper triangle row by row).
pub fn kernel_quadratic_form(r: &[f64], w: &[f64], kernel: &KernelSpec) -> f64 {
    let (c, v) = group_by_value(r, w);
    let mut total = 0.0;
    for a in 0..c.len() {
        let mut row = 0.5 * v[a];
        for b in (a + 1)..c.len() {
            row += v[b] * kernel.eval(c[a], c[b]);
        }
        total += 2.0 * v[a] * row;
    }
    total
}

fn clamp_nonneg(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

/// Maximum mean calibration error of one environment, as the squared RKHS norm
/// `(1/m^2) sum_{i,j} (c_i - r_i)(c_j - r_j) k(r_i, r_j)`.
pub fn mmce(conf: &[f64], labels: &[f64], kernel: &KernelSpec) -> Result<f64> {
    check_predictions(conf, labels)?;
    if conf.is_empty() {
        return Err(Error::Empty("MMCE needs at least one prediction"));
    }
    let m = conf.len() as f64;
    let (r, d): (Vec<f64>, Vec<f64>) = conf
        .iter()
        .zip(labels)
        .map(|(&f, &y)| {
            let (r, c) = confidence_and_correctness(f, y);
            (r, (c - r) / m)
        })
        .unzip();
    Ok(clamp_nonneg(kernel_quadratic_form(&r, &d, kernel)))
}

/// Population MMCE of a discrete distribution given as `(f, y, probability)` outcomes.
pub fn mmce_population(outcomes: &[(f64, f64, f64)], kernel: &KernelSpec) -> f64 {
    let (r, d): (Vec<f64>, Vec<f64>) = outcomes
        .iter()
        .map(|&(f, y, p)| {
            let (r, c) = confidence_and_correctness(f, y);
            (r, p * (c - r))
        })
        .unzip();
    clamp_nonneg(kernel_quadratic_form(&r, &d, kernel))
}

/// MMCE and its derivative with respect to each confidence `f_i`, holding the
/// correctness indicators fixed. At `f = 0.5` the derivative of `max(f, 1-f)`
/// is taken from the right, matching the tie rule of the indicator.
pub fn mmce_with_grad(
    conf: &[f64],
    labels: &[f64],
    kernel: &KernelSpec,
) -> Result<(f64, Vec<f64>)> {
    check_predictions(conf, labels)?;
    if conf.is_empty() {
        return Err(Error::Empty("MMCE needs at least one prediction"));
    }
    let KernelKind::Rbf = kernel.kind;
    let m = conf.len() as f64;
    let (r, d): (Vec<f64>, Vec<f64>) = conf
        .iter()
        .zip(labels)
        .map(|(&f, &y)| {
            let (r, c) = confidence_and_correctness(f, y);
            (r, c - r)
        })
        .unzip();
    let (centres, weights) = group_by_value(&r, &d);
    let u = centres.len();
    // a[u] = sum_v k_uv W_v ; b[u] = sum_v k_uv W_v (r_u - r_v)
    let mut a = vec![0.0; u];
    let mut b = vec![0.0; u];
    for p in 0..u {
        for q in 0..u {
            let k = kernel.eval(centres[p], centres[q]);
            a[p] += k * weights[q];
            b[p] += k * weights[q] * (centres[p] - centres[q]);
        }
    }
    let value: f64 = (0..u).map(|p| weights[p] * a[p]).sum::<f64>() / (m * m);
    let scale = 2.0 / (m * m);
    let grad = conf
        .iter()
        .zip(r.iter().zip(&d))
        .map(|(&f, (&ri, &di))| {
            let p = centres.partition_point(|&c| c < ri);
            let d_r = scale * (-a[p] - 2.0 * kernel.gamma * di * b[p]);
            let dr_df = if f >= 0.5 { 1.0 } else { -1.0 };
            d_r * dr_df
        })
        .collect();
    Ok((clamp_nonneg(value), grad))
}

/// CLOvE: sum of per-environment MMCE.
pub fn clove(preds: &PredictionSet, kernel: &KernelSpec) -> Result<f64> {
    if preds.envs.is_empty() {
        return Err(Error::Empty("CLOvE needs at least one environment"));
    }
    preds
        .envs
        .iter()
        .map(|e| mmce(&e.confidences, &e.labels, kernel))
        .sum()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logit of a probability clipped to `[eps, 1 - eps]`.
pub fn logit_clipped(f: f64, eps: f64) -> f64 {
    let f = f.clamp(eps, 1.0 - eps);
    (f / (1.0 - f)).ln()
}

/// Numerically stable binary cross-entropy on a logit.
#[inline]
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    // log(1 + e^z) - y z
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - y * z
}

/// `d/dw [mean_i CE(sigmoid(w z_i), y_i)]` at `w = 1`, i.e. `mean_i (sigmoid(z_i) - y_i) z_i`.
pub fn irmv1_env_derivative(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            got: logits.len(),
        });
    }
    if logits.is_empty() {
        return Err(Error::Empty("IRMv1 needs at least one prediction"));
    }
    let m = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| (sigmoid(z) - y) * z)
        .sum::<f64>()
        / m)
}

/// IRMv1 penalty: squared logit-scale derivative per environment, summed.
pub fn irmv1_penalty<'a, I>(envs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let mut total = 0.0;
    let mut n = 0;
    for (z, y) in envs {
        total += irmv1_env_derivative(z, y)?.powi(2);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("IRMv1 needs at least one environment"));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
    Max,
}

pub fn aggregate(scores: &[f64], mode: Aggregate) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("nothing to aggregate"));
    }
    Ok(match mode {
        Aggregate::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
        Aggregate::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMetrics {
    pub ece: f64,
    pub mmce: f64,
    pub brier: f64,
    pub cal: f64,
    #[serde(rename = "ref")]
    pub refinement: f64,
}

/// Per-environment scores plus cross-environment aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_env: BTreeMap<String, EnvMetrics>,
    pub mean_ece: f64,
    pub max_ece: f64,
    pub clove: f64,
    pub irmv1: f64,
}

/// Probabilities are clipped to `[LOGIT_EPS, 1 - LOGIT_EPS]` before taking logits.
pub const LOGIT_EPS: f64 = 1e-12;

pub fn metric_report(
    preds: &PredictionSet,
    num_bins: usize,
    kernel: &KernelSpec,
) -> Result<MetricReport> {
    if preds.envs.is_empty() {
        return Err(Error::Empty("metric report needs at least one environment"));
    }
    let mut per_env = BTreeMap::new();
    let mut eces = Vec::new();
    let mut clove = 0.0;
    let mut irm = 0.0;
    for e in &preds.envs {
        let ece = ece(&e.confidences, &e.labels, num_bins)?;
        let mm = mmce(&e.confidences, &e.labels, kernel)?;
        let b = brier_decomposition(&e.confidences, &e.labels)?;
        let logits: Vec<f64> = e
            .confidences
            .iter()
            .map(|&f| logit_clipped(f, LOGIT_EPS))
            .collect();
        irm += irmv1_env_derivative(&logits, &e.labels)?.powi(2);
        clove += mm;
        eces.push(ece);
        per_env.insert(
            e.env_id.clone(),
            EnvMetrics {
                ece,
                mmce: mm,
                brier: b.brier,
                cal: b.cal,
                refinement: b.refinement,
            },
        );
    }
    Ok(MetricReport {
        per_env,
        mean_ece: aggregate(&eces, Aggregate::Mean)?,
        max_ece: aggregate(&eces, Aggregate::Max)?,
        clove,
        irmv1: irm,
    })
}
