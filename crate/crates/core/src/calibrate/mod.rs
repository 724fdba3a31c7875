//! Post-hoc recalibration: Platt scaling, isotonic regression, and pooled or
//! worst-case isotonic fits over several environments.

mod isotonic;
mod platt;
mod robust;

pub use isotonic::{fit_isotonic, pava, Interp, MonotoneMap};
pub use platt::{fit_platt, PlattMap, PLATT_CLIP};
pub use robust::{calibrate_robust, RobustFit, RobustOptions};

use crate::metrics::{check_predictions, EnvPredictions, PredictionSet};
use crate::{Error, Result};

/// A fitted map from raw confidence to recalibrated confidence.
pub trait Recalibrator {
    fn map(&self, f: f64) -> f64;
}

/// Elementwise composition `map ∘ f`.
pub fn apply<R: Recalibrator + ?Sized>(map: &R, confidences: &[f64]) -> Vec<f64> {
    confidences.iter().map(|&f| map.map(f)).collect()
}

/// Recalibrates every environment of a prediction set.
pub fn apply_set<R: Recalibrator + ?Sized>(map: &R, preds: &PredictionSet) -> PredictionSet {
    PredictionSet {
        envs: preds
            .envs
            .iter()
            .map(|e| EnvPredictions {
                env_id: e.env_id.clone(),
                confidences: apply(map, &e.confidences),
                labels: e.labels.clone(),
            })
            .collect(),
    }
}

/// Pools all environments and fits one isotonic map.
pub fn calibrate_naive(preds: &PredictionSet) -> Result<MonotoneMap> {
    if preds.envs.is_empty() {
        return Err(Error::Empty(
            "naive calibration needs at least one environment",
        ));
    }
    let (f, y) = preds.pooled();
    fit_isotonic(&f, &y)
}

/// Mean squared error of `map ∘ f` against the labels.
pub fn squared_error<R: Recalibrator + ?Sized>(
    map: &R,
    confidences: &[f64],
    labels: &[f64],
) -> Result<f64> {
    check_predictions(confidences, labels)?;
    if confidences.is_empty() {
        return Err(Error::Empty("squared error of an empty prediction set"));
    }
    let s: f64 = confidences
        .iter()
        .zip(labels)
        .map(|(&f, &y)| (map.map(f) - y).powi(2))
        .sum();
    Ok(s / confidences.len() as f64)
}

/// Largest per-environment squared error of `map ∘ f`.
pub fn worst_env_squared_error<R: Recalibrator + ?Sized>(
    map: &R,
    preds: &PredictionSet,
) -> Result<f64> {
    if preds.envs.is_empty() {
        return Err(Error::Empty("no environments"));
    }
    let mut worst = f64::NEG_INFINITY;
    for e in &preds.envs {
        worst = worst.max(squared_error(map, &e.confidences, &e.labels)?);
    }
    Ok(worst)
}
