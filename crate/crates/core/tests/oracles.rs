use mdcal::calibrate::{
    calibrate_naive, calibrate_robust, fit_isotonic, pava, squared_error, worst_env_squared_error,
    Recalibrator, RobustOptions,
};
use mdcal::env_data::{generate_two_bit, two_bit_posterior, TwoBitEnvSpec};
use mdcal::metrics::{brier_decomposition, ece, mmce, EnvPredictions, KernelSpec, PredictionSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn preds(envs: Vec<(Vec<f64>, Vec<f64>)>) -> PredictionSet {
    PredictionSet::new(
        envs.into_iter()
            .enumerate()
            .map(|(i, (f, y))| EnvPredictions::new(format!("e{i}"), f, y).unwrap())
            .collect(),
    )
    .unwrap()
}

/// Plain double sum with the correctness flag of the thresholded prediction.
fn mmce_brute(f: &[f64], y: &[f64], gamma: f64) -> f64 {
    let m = f.len() as f64;
    let rc: Vec<(f64, f64)> = f
        .iter()
        .zip(y)
        .map(|(&f, &y)| {
            let pred = if f >= 0.5 { 1.0 } else { 0.0 };
            (f.max(1.0 - f), if pred == y { 1.0 } else { 0.0 })
        })
        .collect();
    let mut s = 0.0;
    for &(ri, ci) in &rc {
        for &(rj, cj) in &rc {
            s += (ci - ri) * (cj - rj) * (-gamma * (ri - rj).powi(2)).exp();
        }
    }
    s / (m * m)
}

/// Best monotone least-squares fit over all partitions into contiguous blocks.
fn exhaustive_isotonic(y: &[f64], w: &[f64]) -> f64 {
    let n = y.len();
    let mut best = f64::INFINITY;
    for mask in 0..(1u32 << (n - 1)) {
        let mut blocks = vec![];
        let mut start = 0;
        for i in 0..n {
            if i == n - 1 || mask & (1 << i) != 0 {
                blocks.push((start, i + 1));
                start = i + 1;
            }
        }
        let means: Vec<f64> = blocks
            .iter()
            .map(|&(a, b)| {
                (a..b).map(|i| w[i] * y[i]).sum::<f64>() / (a..b).map(|i| w[i]).sum::<f64>()
            })
            .collect();
        if means.windows(2).any(|p| p[0] > p[1]) {
            continue;
        }
        let obj: f64 = blocks
            .iter()
            .zip(&means)
            .map(|(&(a, b), mu)| (a..b).map(|i| w[i] * (y[i] - mu).powi(2)).sum::<f64>())
            .sum();
        best = best.min(obj);
    }
    best
}

fn labelled(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((0.0f64..=1.0, prop::bool::ANY), 1..max).prop_map(|v| {
        v.into_iter()
            .map(|(f, b)| (f, if b { 1.0 } else { 0.0 }))
            .unzip()
    })
}

proptest! {
    #[test]
    fn ece_is_in_unit_interval_and_order_free((f, y) in labelled(60), bins in 1usize..20, seed in any::<u64>()) {
        let e = ece(&f, &y, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let mut idx: Vec<usize> = (0..f.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let fp: Vec<f64> = idx.iter().map(|&i| f[i]).collect();
        let yp: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        prop_assert!((ece(&fp, &yp, bins).unwrap() - e).abs() < 1e-12);
    }

    #[test]
    fn brier_splits_into_calibration_and_refinement((f, y) in labelled(80)) {
        let d = brier_decomposition(&f, &y).unwrap();
        let direct = f.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / f.len() as f64;
        prop_assert!((d.brier - direct).abs() < 1e-12);
        prop_assert!((d.brier - d.cal - d.refinement).abs() < 1e-10);
        prop_assert!(d.cal >= 0.0 && d.refinement >= 0.0);
    }

    #[test]
    fn brier_decomposition_with_repeated_values(v in prop::collection::vec((0usize..5, prop::bool::ANY), 1..60)) {
        let f: Vec<f64> = v.iter().map(|&(k, _)| k as f64 / 4.0).collect();
        let y: Vec<f64> = v.iter().map(|&(_, b)| if b { 1.0 } else { 0.0 }).collect();
        let d = brier_decomposition(&f, &y).unwrap();
        prop_assert!((d.brier - d.cal - d.refinement).abs() < 1e-10);
    }

    #[test]
    fn mmce_matches_double_sum_and_is_nonnegative((f, y) in labelled(40), gamma in 0.1f64..100.0) {
        let k = KernelSpec::rbf(gamma).unwrap();
        let v = mmce(&f, &y, &k).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert!((v - mmce_brute(&f, &y, gamma)).abs() < 1e-12);
    }

    #[test]
    fn pava_is_exhaustive_optimum(v in prop::collection::vec((0.0f64..1.0, 0.1f64..3.0), 1..=8)) {
        let (y, w): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let z = pava(&y, &w);
        prop_assert!(z.windows(2).all(|p| p[0] <= p[1]));
        let obj: f64 = (0..y.len()).map(|i| w[i] * (y[i] - z[i]).powi(2)).sum();
        prop_assert!((obj - exhaustive_isotonic(&y, &w)).abs() < 1e-9);
    }

    #[test]
    fn isotonic_maps_are_monotone_probabilities((f, y) in labelled(60), probes in prop::collection::vec(0.0f64..=1.0, 2..20)) {
        let map = fit_isotonic(&f, &y).unwrap();
        let mut p = probes;
        p.sort_by(f64::total_cmp);
        let out: Vec<f64> = p.iter().map(|&x| map.map(x)).collect();
        prop_assert!(out.windows(2).all(|w| w[0] <= w[1] + 1e-15));
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn robust_worst_env_error_never_exceeds_naive(a in labelled(25), b in labelled(25)) {
        let s = preds(vec![a, b]);
        let fit = calibrate_robust(&s, &RobustOptions::default()).unwrap();
        let naive = calibrate_naive(&s).unwrap();
        prop_assert!(fit.objective <= worst_env_squared_error(&naive, &s).unwrap() + 1e-12);
        prop_assert!(fit.map.values().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn posterior_matches_joint_table(alpha in 0.0f64..=1.0, beta in 0.0f64..=1.0) {
        let spec = TwoBitEnvSpec::new(alpha, beta).unwrap();
        for x1 in [-1.0, 1.0] {
            for x2 in [-1.0, 1.0] {
                // P(y, x1, x2) with y uniform on {-1, 1} and independent flips
                let joint = |y: f64| {
                    let p1 = if x1 == y { 1.0 - alpha } else { alpha };
                    let p2 = if x2 == y { 1.0 - beta } else { beta };
                    0.5 * p1 * p2
                };
                let (pos, neg) = (joint(1.0), joint(-1.0));
                if pos + neg == 0.0 {
                    continue;
                }
                let got = two_bit_posterior(&spec, x1, x2).unwrap();
                prop_assert!((got - pos / (pos + neg)).abs() < 1e-12, "{got} vs {}", pos / (pos + neg));
            }
        }
    }
}

/// Two environments whose labels are miscalibrated in opposite directions.
fn opposing_instance(rng: &mut ChaCha8Rng) -> PredictionSet {
    let shift = rng.random_range(0.05..0.3);
    let envs = [shift, -shift]
        .iter()
        .map(|&s| {
            let n = rng.random_range(30..150);
            let f: Vec<f64> = (0..n)
                .map(|_| (rng.random::<f64>() * 10.0).floor() / 10.0 + 0.05)
                .collect();
            let y: Vec<f64> = f
                .iter()
                .map(|&p| {
                    if rng.random::<f64>() < (p + s).clamp(0.0, 1.0) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            (f, y)
        })
        .collect();
    preds(envs)
}

#[test]
fn robust_beats_naive_on_opposing_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let s = opposing_instance(&mut rng);
        let fit = calibrate_robust(&s, &RobustOptions::default()).unwrap();
        let robust = worst_env_squared_error(&fit.map, &s).unwrap();
        let naive = worst_env_squared_error(&calibrate_naive(&s).unwrap(), &s).unwrap();
        assert!(robust <= naive, "case {case}: {robust} > {naive}");
    }
}

#[test]
fn single_environment_robust_equals_isotonic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let n = rng.random_range(5..200);
        let f: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = f
            .iter()
            .map(|&p| {
                if rng.random::<f64>() < p * p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let fit = calibrate_robust(
            &preds(vec![(f.clone(), y.clone())]),
            &RobustOptions::default(),
        )
        .unwrap();
        let iso = squared_error(&fit_isotonic(&f, &y).unwrap(), &f, &y).unwrap();
        assert!(
            (fit.objective - iso).abs() < 1e-6,
            "{} vs {iso}",
            fit.objective
        );
    }
}

fn invariant_mmce(beta: f64, m: usize, seed: u64) -> f64 {
    let spec = TwoBitEnvSpec::new(0.1, beta).unwrap();
    let (x, y) = generate_two_bit(&spec, m, seed).unwrap();
    // x1 carries the shared flip rate, so P(y = 1 | x1) is the invariant posterior
    let f: Vec<f64> = x
        .iter()
        .map(|r| if r[0] > 0.0 { 0.9 } else { 0.1 })
        .collect();
    mmce(&f, &y, &KernelSpec::default()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    0.5 * (v[(n - 1) / 2] + v[n / 2])
}

#[test]
fn invariant_posterior_mmce_vanishes_with_sample_size() {
    for beta in [0.05, 0.25] {
        for seed in 0..20 {
            assert!(invariant_mmce(beta, 10_000, seed) <= 0.05);
        }
        let meds: Vec<f64> = [100, 1_000, 10_000]
            .iter()
            .map(|&m| median((0..20).map(|s| invariant_mmce(beta, m, s)).collect()))
            .collect();
        assert!(
            meds.windows(2).all(|w| w[1] < w[0]),
            "beta {beta}: {meds:?}"
        );
    }
}
