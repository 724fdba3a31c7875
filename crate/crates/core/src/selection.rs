use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::calibrate::{apply, fit_isotonic, MonotoneMap, Recalibrator};
use crate::env_data::EnvironmentBundle;
use crate::metrics::{brier_decomposition, ece, DEFAULT_BINS};
use crate::models::Model;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub model: Model,
}

/// Candidate classifiers plus per-environment validation data.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    models: Vec<Candidate>,
    validation: EnvironmentBundle,
}

impl CandidatePool {
    pub fn new(models: Vec<Candidate>, validation: EnvironmentBundle) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Empty("candidate pool"));
        }
        let d = validation.feature_dim();
        for c in &models {
            if !c.model.is_classifier() {
                return Err(Error::InvalidArgument(format!(
                    "candidate {} is not a classifier",
                    c.id
                )));
            }
            if c.model.input_dim() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: c.model.input_dim(),
                });
            }
        }
        Ok(Self { models, validation })
    }

    pub fn models(&self) -> &[Candidate] {
        &self.models
    }

    pub fn validation(&self) -> &EnvironmentBundle {
        &self.validation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SelectionMode {
    WorstCaseEce,
    ThresholdAvgEce { acc_threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub mode: SelectionMode,
    pub num_bins: usize,
    pub model_ids: Vec<String>,
    pub env_ids: Vec<String>,
    /// `ece[j][i]`: model `j` after pooled isotonic recalibration, environment `i`.
    pub ece: Vec<Vec<f64>>,
    pub worst_ece: Vec<f64>,
    pub mean_ece: Vec<f64>,
    /// Pooled validation accuracy of each recalibrated model.
    pub val_acc: Vec<f64>,
    pub chosen_index: Option<usize>,
    pub chosen: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl SelectionReport {
    /// CSV with header `model_id,env_id,ece,val_acc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_id,env_id,ece,val_acc\n");
        for (j, id) in self.model_ids.iter().enumerate() {
            for (i, env) in self.env_ids.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{}", id, env, self.ece[j][i], self.val_acc[j]);
            }
        }
        out
    }

    /// Criterion value of each model under the report's mode.
    pub fn criterion(&self) -> &[f64] {
        match self.mode {
            SelectionMode::WorstCaseEce => &self.worst_ece,
            SelectionMode::ThresholdAvgEce { .. } => &self.mean_ece,
        }
    }
}

/// Predicted class is 1 iff `f >= 0.5`.
pub fn accuracy(conf: &[f64], labels: &[f64]) -> Result<f64> {
    if conf.len() != labels.len() {
        return Err(Error::Dimension {
            expected: conf.len(),
            got: labels.len(),
        });
    }
    if conf.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let hits = conf
        .iter()
        .zip(labels)
        .filter(|(f, y)| (**f >= 0.5) == (**y > 0.5))
        .count();
    Ok(hits as f64 / conf.len() as f64)
}

struct Scores {
    ece: Vec<f64>,
    acc: f64,
}

fn score(model: &Model, validation: &EnvironmentBundle, num_bins: usize) -> Result<Scores> {
    let per_env: Vec<Vec<f64>> = validation
        .environments()
        .iter()
        .map(|e| model.forward(&e.features))
        .collect::<Result<_>>()?;
    let pooled: Vec<f64> = per_env.iter().flatten().copied().collect();
    let (_, labels) = validation.pooled();
    let map = fit_isotonic(&pooled, &labels)?;
    let mut eces = Vec::with_capacity(per_env.len());
    let mut recal = Vec::with_capacity(pooled.len());
    for (p, e) in per_env.iter().zip(validation.environments()) {
        let z = apply(&map, p);
        eces.push(ece(&z, &e.labels, num_bins)?);
        recal.extend(z);
    }
    Ok(Scores {
        ece: eces,
        acc: accuracy(&recal, &labels)?,
    })
}

fn build(pool: &CandidatePool, mode: SelectionMode, num_bins: usize) -> Result<SelectionReport> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("number of bins must be >= 1".into()));
    }
    let scores: Vec<Scores> = pool
        .models
        .iter()
        .map(|c| score(&c.model, &pool.validation, num_bins))
        .collect::<Result<_>>()?;
    let k = pool.validation.num_environments() as f64;
    Ok(SelectionReport {
        mode,
        num_bins,
        model_ids: pool.models.iter().map(|c| c.id.clone()).collect(),
        env_ids: pool
            .validation
            .environments()
            .iter()
            .map(|e| e.id.clone())
            .collect(),
        worst_ece: scores
            .iter()
            .map(|s| s.ece.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        mean_ece: scores
            .iter()
            .map(|s| s.ece.iter().sum::<f64>() / k)
            .collect(),
        val_acc: scores.iter().map(|s| s.acc).collect(),
        ece: scores.into_iter().map(|s| s.ece).collect(),
        chosen_index: None,
        chosen: None,
        diagnostic: None,
    })
}

/// Lowest criterion among eligible models; first index wins ties.
fn argmin(values: &[f64], eligible: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, v) in values.iter().enumerate() {
        if eligible(j) && best.is_none_or(|b| *v < values[b]) {
            best = Some(j);
        }
    }
    best
}

fn choose(mut report: SelectionReport, idx: Option<usize>) -> SelectionReport {
    report.chosen_index = idx;
    report.chosen = idx.map(|j| report.model_ids[j].clone());
    report
}

/// Fits one isotonic map per model on the pooled validation data, scores
/// the recalibrated model by ECE in every environment and returns the model
/// whose worst environment is best.
pub fn select_worst_case_ece(pool: &CandidatePool, num_bins: usize) -> Result<SelectionReport> {
    let report = build(pool, SelectionMode::WorstCaseEce, num_bins)?;
    let idx = argmin(&report.worst_ece, |_| true);
    Ok(choose(report, idx))
}

/// Lowest mean per-environment ECE among models whose recalibrated
/// validation accuracy is at least `acc_threshold`. Returns an empty choice
/// with a diagnostic when no model qualifies.
pub fn select_threshold_avg_ece(
    pool: &CandidatePool,
    acc_threshold: f64,
    num_bins: usize,
) -> Result<SelectionReport> {
    if !(0.0..=1.0).contains(&acc_threshold) {
        return Err(Error::InvalidArgument(format!(
            "accuracy threshold must lie in [0,1], got {acc_threshold}"
        )));
    }
    let report = build(
        pool,
        SelectionMode::ThresholdAvgEce { acc_threshold },
        num_bins,
    )?;
    let idx = argmin(&report.mean_ece, |j| report.val_acc[j] >= acc_threshold);
    let mut report = choose(report, idx);
    if idx.is_none() {
        let best = report
            .val_acc
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        report.diagnostic = Some(format!(
            "no model reaches validation accuracy {acc_threshold} (best {best})"
        ));
    }
    Ok(report)
}

/// Convenience wrapper defaulting to the standard bin count.
pub fn select(pool: &CandidatePool, mode: SelectionMode) -> Result<SelectionReport> {
    match mode {
        SelectionMode::WorstCaseEce => select_worst_case_ece(pool, DEFAULT_BINS),
        SelectionMode::ThresholdAvgEce { acc_threshold } => {
            select_threshold_avg_ece(pool, acc_threshold, DEFAULT_BINS)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub accuracy: f64,
    pub ece: f64,
    pub brier: f64,
}

/// Scores `model` (optionally followed by `recal`) on all rows of `test`.
pub fn evaluate_ood(
    model: &Model,
    recal: Option<&MonotoneMap>,
    test: &EnvironmentBundle,
    num_bins: usize,
) -> Result<OodReport> {
    let (x, y) = test.pooled();
    let raw = model.forward(&x)?;
    let p = match recal {
        Some(m) => raw.iter().map(|&f| m.map(f)).collect(),
        None => raw,
    };
    evaluate_predictions(&p, &y, num_bins)
}

pub fn evaluate_predictions(conf: &[f64], labels: &[f64], num_bins: usize) -> Result<OodReport> {
    Ok(OodReport {
        accuracy: accuracy(conf, labels)?,
        ece: ece(conf, labels, num_bins)?,
        brier: brier_decomposition(conf, labels)?.brier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_data::{two_bit_bundle, TwoBitEnvSpec};
    use crate::models::{LinearClassifier, Link};

    fn linear(a: f64, b: f64, c: f64) -> Model {
        Model::Linear(LinearClassifier {
            w: vec![a, b],
            b: c,
            link: Link::Logistic,
        })
    }

    fn bundle(envs: &[(f64, f64)], n: usize, seed: u64) -> EnvironmentBundle {
        let specs: Vec<(String, TwoBitEnvSpec)> = envs
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| (format!("e{}", i + 1), TwoBitEnvSpec::new(a, b).unwrap()))
            .collect();
        two_bit_bundle(&specs, n, seed).unwrap()
    }

    fn cand(id: &str, m: Model) -> Candidate {
        Candidate {
            id: id.into(),
            model: m,
        }
    }

    #[test]
    fn single_candidate_is_selected() {
        let pool = CandidatePool::new(
            vec![cand("only", linear(1.0, 0.0, 0.0))],
            bundle(&[(0.1, 0.05)], 200, 0),
        )
        .unwrap();
        let r = select_worst_case_ece(&pool, 10).unwrap();
        assert_eq!(r.chosen.as_deref(), Some("only"));
        assert_eq!(r.ece.len(), 1);
    }

    #[test]
    fn identical_models_tie_to_the_first() {
        let m = linear(1.0, 0.5, 0.0);
        let pool = CandidatePool::new(
            vec![cand("a", m.clone()), cand("b", m)],
            bundle(&[(0.1, 0.05), (0.2, 0.05)], 500, 1),
        )
        .unwrap();
        assert_eq!(
            select_worst_case_ece(&pool, 10).unwrap().chosen_index,
            Some(0)
        );
        assert_eq!(
            select_threshold_avg_ece(&pool, 0.0, 10)
                .unwrap()
                .chosen_index,
            Some(0)
        );
    }

    #[test]
    fn invariant_model_wins_worst_case_selection() {
        // here the flip rate of x2 is shared, so x2 carries the invariant signal
        let pool = CandidatePool::new(
            vec![
                cand("spurious", linear(3.0, 0.0, 0.0)),
                cand("invariant", linear(0.0, 19f64.ln(), 0.0)),
            ],
            bundle(&[(0.1, 0.05), (0.2, 0.05)], 10_000, 2),
        )
        .unwrap();
        let r = select_worst_case_ece(&pool, 10).unwrap();
        assert_eq!(r.chosen.as_deref(), Some("invariant"));
        let crit = r.criterion();
        let j = r.chosen_index.unwrap();
        assert!(crit.iter().all(|v| crit[j] <= *v));
    }

    #[test]
    fn threshold_one_on_imperfect_models_selects_nothing() {
        let pool = CandidatePool::new(
            vec![cand("inv", linear(2.0, 0.0, 0.0))],
            bundle(&[(0.1, 0.05)], 1000, 3),
        )
        .unwrap();
        let r = select_threshold_avg_ece(&pool, 1.0, 10).unwrap();
        assert!(r.chosen.is_none());
        assert!(r.diagnostic.unwrap().contains("no model"));
        assert!(select_threshold_avg_ece(&pool, 1.5, 10).is_err());
    }

    #[test]
    fn threshold_zero_is_the_average_ece_argmin() {
        let pool = CandidatePool::new(
            vec![
                cand("x2", linear(0.0, 2.5, 0.0)),
                cand("inv", linear(9f64.ln(), 0.0, 0.0)),
                cand("mix", linear(1.0, 3.0, 0.0)),
            ],
            bundle(&[(0.1, 0.02), (0.1, 0.1)], 5000, 4),
        )
        .unwrap();
        let r = select_threshold_avg_ece(&pool, 0.0, 10).unwrap();
        let j = r.chosen_index.unwrap();
        assert!(r.mean_ece.iter().all(|v| r.mean_ece[j] <= *v));
    }

    #[test]
    fn ood_scores_of_trivial_predictors() {
        let y = [0.0, 1.0, 1.0, 0.0];
        let perfect = evaluate_predictions(&y, &y, 10).unwrap();
        assert_eq!(
            (perfect.accuracy, perfect.ece, perfect.brier),
            (1.0, 0.0, 0.0)
        );
        let half = evaluate_predictions(&[0.5; 4], &y, 10).unwrap();
        assert_eq!(half.accuracy, 0.5);
        assert!(half.ece.abs() < 1e-15);
    }

    #[test]
    fn invariant_posterior_accuracy_on_shifted_environment() {
        let test = bundle(&[(0.1, 0.9)], 10_000, 5);
        let r = evaluate_ood(&linear(9f64.ln(), 0.0, 0.0), None, &test, 10).unwrap();
        let se = (0.9f64 * 0.1 / 10_000.0).sqrt();
        assert!((r.accuracy - 0.9).abs() < 3.0 * se, "{}", r.accuracy);
    }

    #[test]
    fn csv_has_one_row_per_model_and_environment() {
        let pool = CandidatePool::new(
            vec![
                cand("a", linear(1.0, 0.0, 0.0)),
                cand("b", linear(0.0, 1.0, 0.0)),
            ],
            bundle(&[(0.1, 0.05), (0.2, 0.05)], 100, 6),
        )
        .unwrap();
        let csv = select_worst_case_ece(&pool, 10).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "model_id,env_id,ece,val_acc");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("a,e1,"));
    }

    #[test]
    fn pool_validation() {
        assert!(CandidatePool::new(vec![], bundle(&[(0.1, 0.05)], 10, 0)).is_err());
        let wrong = Model::Linear(LinearClassifier::zeros(3));
        assert!(CandidatePool::new(vec![cand("w", wrong)], bundle(&[(0.1, 0.05)], 10, 0)).is_err());
    }
}
