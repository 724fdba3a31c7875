use serde::{Deserialize, Serialize};

use super::Recalibrator;
use crate::metrics::{bce_with_logit, check_predictions, logit_clipped, sigmoid};
use crate::{Error, Result};

/// Confidences are clipped to `[PLATT_CLIP, 1 - PLATT_CLIP]` before the logit.
pub const PLATT_CLIP: f64 = 1e-6;

/// `f -> sigmoid(a * logit(f) + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattMap {
    pub a: f64,
    pub b: f64,
}

impl Recalibrator for PlattMap {
    fn map(&self, f: f64) -> f64 {
        sigmoid(self.a * logit_clipped(f, PLATT_CLIP) + self.b)
    }
}

fn mean_loss(u: &[f64], y: &[f64], a: f64, b: f64) -> f64 {
    u.iter()
        .zip(y)
        .map(|(&u, &y)| bce_with_logit(a * u + b, y))
        .sum::<f64>()
        / u.len() as f64
}

/// Damped Newton on the mean cross-entropy; stops when the gradient's
/// max-norm drops below `1e-8` or after 200 iterations.
pub fn fit_platt(conf: &[f64], labels: &[f64]) -> Result<PlattMap> {
    check_predictions(conf, labels)?;
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::InvalidArgument(
            "Platt scaling needs both classes".into(),
        ));
    }
    let u: Vec<f64> = conf.iter().map(|&f| logit_clipped(f, PLATT_CLIP)).collect();
    let m = u.len() as f64;
    let (mut a, mut b) = (1.0, 0.0);
    let mut loss = mean_loss(&u, labels, a, b);
    for _ in 0..200 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&ui, &yi) in u.iter().zip(labels) {
            let p = sigmoid(a * ui + b);
            let r = p - yi;
            let s = p * (1.0 - p);
            ga += r * ui;
            gb += r;
            haa += s * ui * ui;
            hab += s * ui;
            hbb += s;
        }
        let (ga, gb) = (ga / m, gb / m);
        if ga.abs().max(gb.abs()) < 1e-8 {
            break;
        }
        let ridge = 1e-12 * (haa + hbb) / m + 1e-300;
        let (haa, hab, hbb) = (haa / m + ridge, hab / m, hbb / m + ridge);
        let det = haa * hbb - hab * hab;
        let (mut da, mut db) = if det > 0.0 && det.is_finite() {
            (-(hbb * ga - hab * gb) / det, -(haa * gb - hab * ga) / det)
        } else {
            (-ga, -gb)
        };
        let mut step_taken = false;
        for _ in 0..60 {
            let cand = mean_loss(&u, labels, a + da, b + db);
            if cand <= loss {
                a += da;
                b += db;
                loss = cand;
                step_taken = true;
                break;
            }
            da *= 0.5;
            db *= 0.5;
        }
        if !step_taken {
            break;
        }
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::NonFinite { step: 0 });
    }
    Ok(PlattMap { a, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn recovers_identity_on_calibrated_data() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 50_000;
        let mut f = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = rng.random_range(-3.0..3.0);
            let p = sigmoid(z);
            f.push(p);
            y.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
        }
        let m = fit_platt(&f, &y).unwrap();
        assert!((m.a - 1.0).abs() < 0.05 && m.b.abs() < 0.05, "{m:?}");
    }

    #[test]
    fn flipped_labels_give_negative_slope() {
        let f = [0.9, 0.8, 0.7, 0.3, 0.2, 0.1, 0.85, 0.15];
        let y = [0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        assert!(fit_platt(&f, &y).unwrap().a < 0.0);
    }

    #[test]
    fn extreme_confidences_stay_finite() {
        let m = fit_platt(&[0.0, 1.0, 0.0, 1.0, 0.5], &[0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        for f in [0.0, 1.0, 0.5] {
            let v = m.map(f);
            assert!(v.is_finite() && v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(fit_platt(&[0.2, 0.7], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn json_shape() {
        let s = serde_json::to_string(&PlattMap { a: 1.5, b: -0.25 }).unwrap();
        assert_eq!(s, r#"{"a":1.5,"b":-0.25}"#);
    }
}
