//! Numerical checks of the linear-Gaussian invariance results.
//!
//! Classification (setting A): a logistic classifier calibrated on every
//! environment in general position puts zero weight on the spurious block.
//! Regression (setting B): a calibrated two-moment linear regressor must use
//! the causal weights and no spurious weights.
//!
//! Residuals are exact functions of the environment parameters; nothing here
//! samples data except the CLOvE training mode.

mod thm1;
mod thm2;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub use thm1::{
    best_t, check_general_position_thm1, classification_residual, constrained_probe,
    constraint_search, diag_matrix_m, ellipsoid_residual, random_probe_min_residual, thm1_matrix,
    train_clove_ratios, verify_theorem1, SearchResult, Thm1Mode, Thm1Options,
};
pub use thm2::{
    regression_m, regression_m2, regression_residuals, theorem2_preconditions, verify_theorem2,
    RegressionResiduals, Thm2Options,
};

/// Which full-rank construction a report refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixKind {
    Thm1Matrix,
    DiagMatrixM,
    RegressionM,
    RegressionM2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralPositionReport {
    pub matrix: MatrixKind,
    /// Smallest numerical rank observed (over probes when there are any).
    pub rank: usize,
    pub required: usize,
    pub passes: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probe_points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintSystem {
    ClassificationSlope,
    Ellipsoid,
    RegressionSlope,
    RegressionIntercept,
    RegressionSecondMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResidual {
    pub system: ConstraintSystem,
    pub residual_norm: f64,
}

/// A candidate solution of a constraint system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Root {
    pub w: Vec<f64>,
    pub t: f64,
    /// Euclidean norm of the stacked residual at the candidate.
    pub residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub theorem: String,
    pub preconditions: BTreeMap<String, bool>,
    pub rank_checks: Vec<GeneralPositionReport>,
    pub best_root: Option<Root>,
    /// `|w_sp|` of the best root (unit-norm `w` for classification), or the
    /// trained `|w_sp| / |w|` ratio in training mode.
    pub spurious_norm: Option<f64>,
    pub passes: bool,
    /// Mode-specific numbers (probe minima, per-lambda ratios, root counts).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
