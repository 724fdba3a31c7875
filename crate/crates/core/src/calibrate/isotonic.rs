use serde::{Deserialize, Serialize};

use super::Recalibrator;
use crate::metrics::check_predictions;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    /// Value of the largest knot not exceeding the input.
    Step,
    #[default]
    Linear,
}

/// Nondecreasing map defined on ascending knots; clamps outside the knot range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MapRepr", into = "MapRepr")]
pub struct MonotoneMap {
    knots: Vec<f64>,
    values: Vec<f64>,
    interp: Interp,
}

#[derive(Serialize, Deserialize)]
struct MapRepr {
    knots: Vec<f64>,
    values: Vec<f64>,
    #[serde(default)]
    interp: Interp,
}

impl TryFrom<MapRepr> for MonotoneMap {
    type Error = Error;
    fn try_from(r: MapRepr) -> Result<Self> {
        MonotoneMap::new(r.knots, r.values, r.interp)
    }
}

impl From<MonotoneMap> for MapRepr {
    fn from(m: MonotoneMap) -> Self {
        MapRepr {
            knots: m.knots,
            values: m.values,
            interp: m.interp,
        }
    }
}

impl MonotoneMap {
    pub fn new(knots: Vec<f64>, values: Vec<f64>, interp: Interp) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::Empty("monotone map needs at least one knot"));
        }
        if knots.len() != values.len() {
            return Err(Error::Dimension {
                expected: knots.len(),
                got: values.len(),
            });
        }
        if knots.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "monotone map contains non-finite numbers".into(),
            ));
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "knots must be strictly ascending".into(),
            ));
        }
        if values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument(
                "values must be nondecreasing".into(),
            ));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("values must lie in [0,1]".into()));
        }
        Ok(Self {
            knots,
            values,
            interp,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn interp(&self) -> Interp {
        self.interp
    }

    pub fn with_interp(mut self, interp: Interp) -> Self {
        self.interp = interp;
        self
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.knots.len();
        if x <= self.knots[0] {
            return self.values[0];
        }
        if x >= self.knots[n - 1] {
            return self.values[n - 1];
        }
        // knots[i-1] < x < knots[i] or x == knots[i-1]
        let i = self.knots.partition_point(|&k| k <= x);
        match self.interp {
            Interp::Step => self.values[i - 1],
            Interp::Linear => {
                let (x0, x1) = (self.knots[i - 1], self.knots[i]);
                let (v0, v1) = (self.values[i - 1], self.values[i]);
                let t = (x - x0) / (x1 - x0);
                (v0 + t * (v1 - v0)).clamp(v0, v1)
            }
        }
    }
}

impl Recalibrator for MonotoneMap {
    fn map(&self, f: f64) -> f64 {
        self.eval(f)
    }
}

/// Weighted pool-adjacent-violators: the nondecreasing sequence minimizing
/// `sum_j w_j (z_j - t_j)^2`. Weights must be positive.
pub fn pava(targets: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(targets.len(), weights.len());
    // blocks as (weighted mean, total weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(targets.len());
    for (&t, &w) in targets.iter().zip(weights) {
        let mut cur = (t, w, 1usize);
        while let Some(&(m, bw, len)) = blocks.last() {
            if m < cur.0 {
                break;
            }
            blocks.pop();
            let tw = bw + cur.1;
            cur = ((m * bw + cur.0 * cur.1) / tw, tw, len + cur.2);
        }
        blocks.push(cur);
    }
    let mut out = Vec::with_capacity(targets.len());
    for (m, _, len) in blocks {
        out.extend(std::iter::repeat_n(m, len));
    }
    out
}

/// Distinct sorted prediction values with their multiplicities and label sums.
pub(crate) fn distinct_points(conf: &[f64], labels: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..conf.len()).collect();
    idx.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]));
    let mut knots: Vec<f64> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    for i in idx {
        let f = conf[i];
        match knots.last() {
            Some(&k) if k == f => {
                *counts.last_mut().unwrap() += 1.0;
                *sums.last_mut().unwrap() += labels[i];
            }
            _ => {
                knots.push(f);
                counts.push(1.0);
                sums.push(labels[i]);
            }
        }
    }
    (knots, counts, sums)
}

/// Least-squares nondecreasing map on the distinct prediction values.
pub fn fit_isotonic(conf: &[f64], labels: &[f64]) -> Result<MonotoneMap> {
    check_predictions(conf, labels)?;
    if conf.is_empty() {
        return Err(Error::Empty("isotonic fit needs at least one prediction"));
    }
    let (knots, counts, sums) = distinct_points(conf, labels);
    let targets: Vec<f64> = sums.iter().zip(&counts).map(|(s, n)| s / n).collect();
    let values = pava(&targets, &counts)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    // -0.0 and 0.0 compare equal but have distinct bits; normalise the first knot
    let knots = knots
        .into_iter()
        .map(|k| if k == 0.0 { 0.0 } else { k })
        .collect();
    MonotoneMap::new(knots, values, Interp::Linear)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimum over all contiguous level-set partitions with monotone block means.
    fn exhaustive(y: &[f64], w: &[f64]) -> f64 {
        let n = y.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << (n - 1)) {
            let mut start = 0;
            let mut prev = f64::NEG_INFINITY;
            let mut obj = 0.0;
            let mut ok = true;
            for i in 0..n {
                if i == n - 1 || mask & (1 << i) != 0 {
                    let sw: f64 = w[start..=i].iter().sum();
                    let m = (start..=i).map(|j| w[j] * y[j]).sum::<f64>() / sw;
                    if m < prev {
                        ok = false;
                        break;
                    }
                    obj += (start..=i).map(|j| w[j] * (y[j] - m).powi(2)).sum::<f64>();
                    prev = m;
                    start = i + 1;
                }
            }
            if ok {
                best = best.min(obj);
            }
        }
        best
    }

    #[test]
    fn pava_hand_example() {
        // sorting by confidence already orders the labels: zero objective
        let m = fit_isotonic(&[0.1, 0.4, 0.3, 0.9], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.knots(), &[0.1, 0.3, 0.4, 0.9]);
        assert_eq!(m.values(), &[0.0, 0.0, 1.0, 1.0]);
        // a genuine violation in knot order is pooled
        let v = fit_isotonic(&[0.1, 0.3, 0.4, 0.9], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(v.values(), &[0.0, 0.5, 0.5, 1.0]);
        assert!((exhaustive(&[0.0, 1.0, 0.0, 1.0], &[1.0; 4]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identity_and_constant_cases() {
        let m = fit_isotonic(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(m.values(), &[0.0, 1.0]);
        let c = fit_isotonic(&[0.2, 0.6, 0.9], &[1.0; 3]).unwrap();
        assert_eq!(c.values(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn pava_matches_exhaustive_on_small_weighted_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let n = rng.random_range(1..=8);
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
            let z = pava(&y, &w);
            assert!(z.windows(2).all(|p| p[0] <= p[1]));
            let obj: f64 = (0..n).map(|i| w[i] * (y[i] - z[i]).powi(2)).sum();
            assert!((obj - exhaustive(&y, &w)).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_clamps_and_interpolates() {
        let m = MonotoneMap::new(vec![0.2, 0.6], vec![0.1, 0.5], Interp::Linear).unwrap();
        assert_eq!(m.eval(0.0), 0.1);
        assert_eq!(m.eval(1.0), 0.5);
        assert!((m.eval(0.4) - 0.3).abs() < 1e-15);
        let s = m.clone().with_interp(Interp::Step);
        assert_eq!(s.eval(0.4), 0.1);
        assert_eq!(s.eval(0.6), 0.5);
        assert_eq!(m.eval(0.6), 0.5);
    }

    #[test]
    fn map_validation_and_json() {
        assert!(MonotoneMap::new(vec![0.2, 0.2], vec![0.1, 0.5], Interp::Linear).is_err());
        assert!(MonotoneMap::new(vec![0.2, 0.3], vec![0.6, 0.5], Interp::Linear).is_err());
        assert!(MonotoneMap::new(vec![], vec![], Interp::Linear).is_err());
        let m = MonotoneMap::new(vec![0.2, 0.6], vec![0.1, 0.5], Interp::Linear).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(
            s,
            r#"{"knots":[0.2,0.6],"values":[0.1,0.5],"interp":"linear"}"#
        );
        assert_eq!(serde_json::from_str::<MonotoneMap>(&s).unwrap(), m);
        assert!(
            serde_json::from_str::<MonotoneMap>(r#"{"knots":[0.6,0.2],"values":[0.1,0.5]}"#)
                .is_err()
        );
    }
}
