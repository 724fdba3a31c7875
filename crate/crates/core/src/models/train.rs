use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use super::objective::{evaluate, Batch};
use super::{Model, ObjectiveSpec};
use crate::env_data::EnvironmentBundle;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adagrad,
    Adam,
}

fn default_batch() -> usize {
    512
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub steps: usize,
    /// Rows drawn from each environment per step; 0 means the whole environment.
    #[serde(default = "default_batch")]
    pub batch_per_env: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub objective: f64,
    pub base_loss: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model: Model,
    pub trace: Vec<TraceRow>,
}

/// CSV with header `step,objective,base_loss,penalty`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,objective,base_loss,penalty\n");
    for r in trace {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.step, r.objective, r.base_loss, r.penalty
        );
    }
    out
}

enum State {
    Sgd,
    Adagrad { acc: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl State {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => State::Sgd,
            OptimizerKind::Adagrad => State::Adagrad { acc: vec![0.0; n] },
            OptimizerKind::Adam => State::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            State::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            State::Adagrad { acc } => {
                for ((p, g), a) in params.iter_mut().zip(grad).zip(acc.iter_mut()) {
                    *a += g * g;
                    *p -= lr * g / (a.sqrt() + 1e-10);
                }
            }
            State::Adam { m, v, t } => {
                let (b1, b2) = (0.9f64, 0.999f64);
                *t += 1;
                let c1 = 1.0 - b1.powi(*t);
                let c2 = 1.0 - b2.powi(*t);
                for i in 0..params.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

/// Minimizes `spec` from the initial `model`, drawing `batch_per_env` rows
/// without replacement from every environment at each step.
///
/// The run is a pure function of its inputs. The regressor's variance is
/// set to the pooled mean squared residual after training.
pub fn train(
    model: Model,
    bundle: &EnvironmentBundle,
    spec: &ObjectiveSpec,
    hyper: &Hyper,
) -> Result<TrainedModel> {
    hyper.validate()?;
    spec.validate_for(&model)?;
    if model.input_dim() != bundle.feature_dim() {
        return Err(Error::Dimension {
            expected: model.input_dim(),
            got: bundle.feature_dim(),
        });
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut params = model.params();
    let mut state = State::new(hyper.optimizer, params.len());
    let mut trace = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let batches: Vec<Batch<'_>> = bundle
            .environments()
            .iter()
            .map(|e| {
                let n = e.len();
                if hyper.batch_per_env == 0 || hyper.batch_per_env >= n {
                    Batch {
                        rows: e.features.iter().map(|r| r.as_slice()).collect(),
                        labels: e.labels.clone(),
                    }
                } else {
                    let idx = index::sample(&mut rng, n, hyper.batch_per_env);
                    Batch {
                        rows: idx.iter().map(|i| e.features[i].as_slice()).collect(),
                        labels: idx.iter().map(|i| e.labels[i]).collect(),
                    }
                }
            })
            .collect();
        let (value, grad) = evaluate(&model, &batches, spec, true)?;
        let grad = grad.expect("gradient requested");
        if !value.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        trace.push(TraceRow {
            step,
            objective: value.total,
            base_loss: value.base,
            penalty: value.penalty,
        });
        state.step(&mut params, &grad, hyper.lr);
        model.set_params(&params)?;
    }
    if let Model::TwoMoment(r) = &mut model {
        let w = r.w.clone();
        let (mut s, mut n) = (0.0, 0.0);
        for e in bundle.environments() {
            for (x, y) in e.features.iter().zip(&e.labels) {
                let mean: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                s += (y - mean).powi(2);
                n += 1.0;
            }
        }
        r.c = (s / n).max(1e-12);
    }
    Ok(TrainedModel { model, trace })
}
