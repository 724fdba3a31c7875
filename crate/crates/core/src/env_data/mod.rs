//! Environment-indexed datasets and the synthetic data-generating processes.
//!
//! Labels are always stored as `{0, 1}` for classification (or real values for
//! regression). Generators that are naturally written with `±1` labels convert
//! on output.

mod io;
mod synth;

use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::{Error, Result};

pub use io::{load_bundle, save_bundle, DataFormat};
pub use synth::{
    generate_setting_a, generate_setting_b, generate_two_bit, two_bit_bundle, two_bit_posterior,
    CausalEnv, GaussianEnvSpecA, GaussianEnvSpecB, SpuriousEnv, TwoBitEnvSpec,
};

/// One environment's labeled rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub id: String,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

impl Environment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Datasets from a finite set of environments sharing one feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BundleRepr", into = "BundleRepr")]
pub struct EnvironmentBundle {
    environments: Vec<Environment>,
    feature_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct BundleRepr {
    environments: Vec<Environment>,
}

impl TryFrom<BundleRepr> for EnvironmentBundle {
    type Error = Error;

    fn try_from(r: BundleRepr) -> Result<Self> {
        EnvironmentBundle::new(r.environments)
    }
}

impl From<EnvironmentBundle> for BundleRepr {
    fn from(b: EnvironmentBundle) -> Self {
        BundleRepr {
            environments: b.environments,
        }
    }
}

impl EnvironmentBundle {
    /// Validates: at least one environment, unique ids, `n_e >= 1`, one shared width.
    pub fn new(environments: Vec<Environment>) -> Result<Self> {
        let first = environments
            .first()
            .ok_or(Error::Empty("bundle has no environments"))?;
        let feature_dim = first.features.first().map_or(0, Vec::len);
        let mut seen = HashSet::new();
        for env in &environments {
            if env.id.is_empty() {
                return Err(Error::InvalidArgument(
                    "environment id must be non-empty".into(),
                ));
            }
            if !seen.insert(env.id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate environment id {:?}",
                    env.id
                )));
            }
            if env.labels.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "environment {:?} has no rows",
                    env.id
                )));
            }
            if env.features.len() != env.labels.len() {
                return Err(Error::Dimension {
                    expected: env.labels.len(),
                    got: env.features.len(),
                });
            }
            if let Some(row) = env.features.iter().find(|r| r.len() != feature_dim) {
                return Err(Error::Dimension {
                    expected: feature_dim,
                    got: row.len(),
                });
            }
        }
        Ok(Self {
            environments,
            feature_dim,
        })
    }

    pub fn environments(&self) -> &[Environment] {
        &self.environments
    }

    pub fn into_environments(self) -> Vec<Environment> {
        self.environments
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_environments(&self) -> usize {
        self.environments.len()
    }

    pub fn get(&self, id: &str) -> Option<&Environment> {
        self.environments.iter().find(|e| e.id == id)
    }

    pub fn total_rows(&self) -> usize {
        self.environments.iter().map(Environment::len).sum()
    }

    /// All rows concatenated in environment order.
    pub fn pooled(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut x = Vec::with_capacity(self.total_rows());
        let mut y = Vec::with_capacity(self.total_rows());
        for env in &self.environments {
            x.extend(env.features.iter().cloned());
            y.extend_from_slice(&env.labels);
        }
        (x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(id: &str, rows: &[[f64; 2]]) -> Environment {
        Environment {
            id: id.into(),
            features: rows.iter().map(|r| r.to_vec()).collect(),
            labels: vec![1.0; rows.len()],
        }
    }

    #[test]
    fn rejects_duplicate_ids_and_empty_envs() {
        let a = env("a", &[[0.0, 1.0]]);
        assert!(EnvironmentBundle::new(vec![a.clone(), a.clone()]).is_err());
        assert!(EnvironmentBundle::new(vec![env("b", &[])]).is_err());
        assert!(EnvironmentBundle::new(vec![]).is_err());
    }

    #[test]
    fn rejects_mixed_widths() {
        let mut b = env("b", &[[0.0, 1.0]]);
        b.features[0].push(3.0);
        assert!(EnvironmentBundle::new(vec![env("a", &[[0.0, 1.0]]), b]).is_err());
    }

    #[test]
    fn pooled_keeps_environment_order() {
        let bundle = EnvironmentBundle::new(vec![
            env("a", &[[0.0, 1.0]]),
            env("b", &[[2.0, 3.0], [4.0, 5.0]]),
        ])
        .unwrap();
        let (x, y) = bundle.pooled();
        assert_eq!(x, vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]]);
        assert_eq!(y.len(), 3);
        assert_eq!(bundle.feature_dim(), 2);
    }
}
