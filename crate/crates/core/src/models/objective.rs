use serde::{Deserialize, Serialize};

use super::Model;
use crate::env_data::EnvironmentBundle;
use crate::metrics::{bce_with_logit, mmce_with_grad, KernelSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    CrossEntropy,
    /// `(f(x) - y)^2` on the probability (classifiers) or the mean (regressor).
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    None,
    Clove,
    Irmv1,
}

/// `sum_e mean_loss_e + lambda * penalty`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub base_loss: BaseLoss,
    pub penalty: Penalty,
    pub lambda: f64,
    #[serde(default)]
    pub kernel: KernelSpec,
}

impl ObjectiveSpec {
    pub fn erm(base_loss: BaseLoss) -> Self {
        Self {
            base_loss,
            penalty: Penalty::None,
            lambda: 0.0,
            kernel: KernelSpec::default(),
        }
    }

    pub fn validate_for(&self, model: &Model) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.kernel.gamma > 0.0) {
            return Err(Error::InvalidArgument("kernel gamma must be > 0".into()));
        }
        if !model.is_classifier()
            && (self.penalty != Penalty::None || self.base_loss != BaseLoss::Squared)
        {
            return Err(Error::InvalidArgument(
                "the two-moment regressor supports only the squared loss without penalty".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub total: f64,
    /// Sum over environments of the mean base loss.
    pub base: f64,
    /// Unweighted penalty (zero when no penalty is configured).
    pub penalty: f64,
}

/// Rows of one environment taking part in an evaluation.
pub(crate) struct Batch<'a> {
    pub rows: Vec<&'a [f64]>,
    pub labels: Vec<f64>,
}

pub(crate) fn full_batches(bundle: &EnvironmentBundle) -> Vec<Batch<'_>> {
    bundle
        .environments()
        .iter()
        .map(|e| Batch {
            rows: e.features.iter().map(|r| r.as_slice()).collect(),
            labels: e.labels.clone(),
        })
        .collect()
}

pub(crate) fn evaluate(
    model: &Model,
    batches: &[Batch<'_>],
    spec: &ObjectiveSpec,
    want_grad: bool,
) -> Result<(ObjectiveValue, Option<Vec<f64>>)> {
    spec.validate_for(model)?;
    if batches.is_empty() {
        return Err(Error::Empty("objective needs at least one environment"));
    }
    let classifier = model.is_classifier();
    let mut grad = want_grad.then(|| vec![0.0; model.num_params()]);
    let (mut base, mut penalty) = (0.0, 0.0);
    for batch in batches {
        let m = batch.labels.len();
        if m == 0 {
            return Err(Error::Empty("objective needs nonempty environments"));
        }
        let mf = m as f64;
        let z = model.logits(&batch.rows)?;
        let p: Vec<f64> = if classifier {
            z.iter().map(|&z| crate::metrics::sigmoid(z)).collect()
        } else {
            z.clone()
        };
        let y = &batch.labels;
        // d objective / d logit
        let mut dz = vec![0.0; m];
        let mut loss = 0.0;
        for i in 0..m {
            match (spec.base_loss, classifier) {
                (BaseLoss::CrossEntropy, _) => {
                    loss += bce_with_logit(z[i], y[i]);
                    dz[i] = (p[i] - y[i]) / mf;
                }
                (BaseLoss::Squared, true) => {
                    loss += (p[i] - y[i]).powi(2);
                    dz[i] = 2.0 * (p[i] - y[i]) * p[i] * (1.0 - p[i]) / mf;
                }
                (BaseLoss::Squared, false) => {
                    loss += (z[i] - y[i]).powi(2);
                    dz[i] = 2.0 * (z[i] - y[i]) / mf;
                }
            }
        }
        base += loss / mf;
        match spec.penalty {
            Penalty::None => {}
            Penalty::Clove => {
                let (v, df) = mmce_with_grad(&p, y, &spec.kernel)?;
                penalty += v;
                for i in 0..m {
                    dz[i] += spec.lambda * df[i] * p[i] * (1.0 - p[i]);
                }
            }
            Penalty::Irmv1 => {
                let g = (0..m).map(|i| (p[i] - y[i]) * z[i]).sum::<f64>() / mf;
                penalty += g * g;
                for i in 0..m {
                    dz[i] +=
                        spec.lambda * 2.0 * g * (p[i] * (1.0 - p[i]) * z[i] + (p[i] - y[i])) / mf;
                }
            }
        }
        if let Some(grad) = grad.as_mut() {
            for (row, &d) in batch.rows.iter().zip(&dz) {
                if d != 0.0 {
                    model.accumulate_logit_grad(row, d, grad);
                }
            }
        }
    }
    let total = base + spec.lambda * penalty;
    Ok((
        ObjectiveValue {
            total,
            base,
            penalty,
        },
        grad,
    ))
}

/// Objective on the full bundle.
pub fn objective(
    model: &Model,
    bundle: &EnvironmentBundle,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveValue> {
    Ok(evaluate(model, &full_batches(bundle), spec, false)?.0)
}

/// Analytic gradient of [`objective`] with respect to the flat parameters;
/// MMCE correctness flags are held fixed.
pub fn gradient(
    model: &Model,
    bundle: &EnvironmentBundle,
    spec: &ObjectiveSpec,
) -> Result<Vec<f64>> {
    Ok(evaluate(model, &full_batches(bundle), spec, true)?
        .1
        .expect("gradient requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env_data::Environment;
    use crate::metrics::{irmv1_penalty, mmce, sigmoid};
    use crate::models::{LinearClassifier, Link, MlpClassifier, TwoMomentRegressor};
    use crate::optim::numeric_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bundle(rng: &mut ChaCha8Rng, k: usize, m: usize, d: usize) -> EnvironmentBundle {
        EnvironmentBundle::new(
            (0..k)
                .map(|e| Environment {
                    id: format!("e{e}"),
                    features: (0..m)
                        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
                        .collect(),
                    labels: (0..m)
                        .map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 })
                        .collect(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn spec(base: BaseLoss, penalty: Penalty, lambda: f64) -> ObjectiveSpec {
        ObjectiveSpec {
            base_loss: base,
            penalty,
            lambda,
            kernel: KernelSpec::default(),
        }
    }

    fn check_fd(model: &Model, bundle: &EnvironmentBundle, s: &ObjectiveSpec) {
        let g = gradient(model, bundle, s).unwrap();
        let p0 = model.params();
        let num = numeric_gradient(
            &|p: &[f64]| {
                let mut probe = model.clone();
                probe.set_params(p).unwrap();
                objective(&probe, bundle, s).unwrap().total
            },
            &p0,
            1e-5,
        );
        let scale = num.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
        for (a, n) in g.iter().zip(&num) {
            let rel = (a - n).abs() / n.abs().max(scale);
            assert!(rel < 1e-4, "{s:?}: analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn single_point_bias_gradient() {
        let b = EnvironmentBundle::new(vec![Environment {
            id: "a".into(),
            features: vec![vec![0.7]],
            labels: vec![1.0],
        }])
        .unwrap();
        let m = Model::Linear(LinearClassifier {
            w: vec![0.4],
            b: -0.2,
            link: Link::Logistic,
        });
        let g = gradient(&m, &b, &ObjectiveSpec::erm(BaseLoss::CrossEntropy)).unwrap();
        assert!((g[1] - (sigmoid(0.4 * 0.7 - 0.2) - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn composition_matches_metric_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_bundle(&mut rng, 2, 9, 3);
        let m = Model::Linear(LinearClassifier {
            w: vec![0.5, -1.0, 0.3],
            b: 0.1,
            link: Link::Logistic,
        });
        let preds: Vec<(Vec<f64>, Vec<f64>)> = b
            .environments()
            .iter()
            .map(|e| (m.forward(&e.features).unwrap(), e.labels.clone()))
            .collect();
        let ce: f64 = b
            .environments()
            .iter()
            .zip(&preds)
            .map(|(e, (p, _))| {
                p.iter()
                    .zip(&e.labels)
                    .map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
                    .sum::<f64>()
                    / p.len() as f64
            })
            .sum();
        let erm = objective(&m, &b, &spec(BaseLoss::CrossEntropy, Penalty::None, 0.0)).unwrap();
        assert!((erm.total - ce).abs() < 1e-12);
        let k = KernelSpec::default();
        let clove: f64 = preds.iter().map(|(p, y)| mmce(p, y, &k).unwrap()).sum();
        let o = objective(&m, &b, &spec(BaseLoss::CrossEntropy, Penalty::Clove, 2.0)).unwrap();
        assert!((o.total - (ce + 2.0 * clove)).abs() < 1e-12);
        let logits: Vec<Vec<f64>> = b
            .environments()
            .iter()
            .map(|e| m.logits(&e.features).unwrap())
            .collect();
        let irm = irmv1_penalty(
            logits
                .iter()
                .zip(&preds)
                .map(|(z, (_, y))| (z.as_slice(), y.as_slice())),
        )
        .unwrap();
        let o = objective(&m, &b, &spec(BaseLoss::CrossEntropy, Penalty::Irmv1, 0.5)).unwrap();
        assert!((o.total - (ce + 0.5 * irm)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let specs = [
            spec(BaseLoss::CrossEntropy, Penalty::None, 0.0),
            spec(BaseLoss::Squared, Penalty::None, 0.0),
            spec(BaseLoss::CrossEntropy, Penalty::Clove, 3.0),
            spec(BaseLoss::CrossEntropy, Penalty::Irmv1, 3.0),
        ];
        for case in 0..50 {
            let b = random_bundle(&mut rng, 2, 8, 3);
            let s = &specs[case % specs.len()];
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let lin = Model::Linear(LinearClassifier {
                w,
                b: rng.random_range(-0.5..0.5),
                link: Link::Logistic,
            });
            check_fd(&lin, &b, s);
            let mlp = Model::Mlp(MlpClassifier::new(3, &[4, 4, 4], case as u64).unwrap());
            check_fd(&mlp, &b, s);
            let reg = Model::TwoMoment(TwoMomentRegressor {
                w: vec![0.2, -0.4, 0.9],
                c: 1.0,
            });
            check_fd(&reg, &b, &spec(BaseLoss::Squared, Penalty::None, 0.0));
        }
    }

    #[test]
    fn degenerate_environment_gradient_is_finite() {
        let b = EnvironmentBundle::new(vec![Environment {
            id: "flat".into(),
            features: vec![vec![1.0, 1.0]; 6],
            labels: vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0],
        }])
        .unwrap();
        let m = Model::Linear(LinearClassifier::zeros(2));
        for p in [Penalty::None, Penalty::Clove, Penalty::Irmv1] {
            assert!(gradient(&m, &b, &spec(BaseLoss::CrossEntropy, p, 1.0))
                .unwrap()
                .iter()
                .all(|g| g.is_finite()));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_bundle(&mut rng, 1, 3, 2);
        let m = Model::Linear(LinearClassifier::zeros(2));
        assert!(objective(&m, &b, &spec(BaseLoss::CrossEntropy, Penalty::Clove, -1.0)).is_err());
        let r = Model::TwoMoment(TwoMomentRegressor {
            w: vec![0.0; 2],
            c: 1.0,
        });
        assert!(objective(&r, &b, &spec(BaseLoss::Squared, Penalty::Clove, 1.0)).is_err());
    }
}
