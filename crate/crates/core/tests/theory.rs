use mdcal::env_data::{generate_setting_b, GaussianEnvSpecA, GaussianEnvSpecB, SpuriousEnv};
use mdcal::theory::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec_a(seed: u64) -> GaussianEnvSpecA {
    GaussianEnvSpecA::sample(3, 2, 5, 0.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn spec_b(seed: u64) -> GaussianEnvSpecB {
    GaussianEnvSpecB::sample(2, 2, 6, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn constraint_search_roots_drop_spurious_features() {
    for seed in 0..20 {
        let spec = spec_a(seed);
        assert!(
            check_general_position_thm1(&spec, 200, seed)
                .unwrap()
                .passes
        );
        let r = constraint_search(&spec, 50, seed).unwrap();
        assert!(r.best.residual < 1e-10, "seed {seed}: {}", r.best.residual);
        let sp = r.best.w[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(sp < 1e-3, "seed {seed}: |w_sp| = {sp}");
        assert!(r.max_spurious_norm_of_roots < 1e-3);
    }
}

#[test]
fn forced_spurious_weight_leaves_a_residual() {
    for seed in 0..5 {
        let spec = spec_a(seed);
        assert!(constrained_probe(&spec, 0.3, 50, seed).unwrap().residual >= 1e-3);
        assert!(random_probe_min_residual(&spec, 0.3, 1000, seed).unwrap() >= 1e-3);
    }
}

#[test]
fn verify_theorem1_constraint_mode_passes() {
    let r = verify_theorem1(
        &spec_a(0),
        Thm1Mode::ConstraintSearch,
        &Thm1Options::default(),
    )
    .unwrap();
    assert!(r.passes, "{r:?}");
    let json = serde_json::to_value(&r).unwrap();
    for key in [
        "theorem",
        "preconditions",
        "rank_checks",
        "best_root",
        "spurious_norm",
        "passes",
    ] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn two_environments_admit_a_shared_spurious_root() {
    // 1-d features, +-1 means 1 (invariant), 1 and 2 (spurious), variances 1, 1, 3.
    // Equal ratios n_i / d_i reduce to b^2 + 2ab - a^2 = 0, so b = (sqrt 2 - 1) a.
    let spec = GaussianEnvSpecA {
        eta: 0.5,
        mu_ns: vec![2.0],
        sigma_ns: vec![vec![1.0]],
        envs: vec![
            SpuriousEnv {
                mu: vec![2.0],
                sigma: vec![vec![1.0]],
            },
            SpuriousEnv {
                mu: vec![4.0],
                sigma: vec![vec![3.0]],
            },
        ],
    };
    let b = 2f64.sqrt() - 1.0;
    let s = (1.0 + b * b).sqrt();
    let w = [1.0 / s, b / s];
    let t = best_t(&spec, &w).unwrap();
    assert!(classification_residual(&spec, &w, t)
        .unwrap()
        .iter()
        .all(|r| r.abs() < 1e-12));
    let r = constraint_search(&spec, 50, 0).unwrap();
    assert!(r.converged_starts > 0);
    assert!(r.max_spurious_norm_of_roots > 0.1);
}

#[test]
fn theorem2_recovers_causal_weights() {
    for seed in 0..20 {
        let spec = spec_b(seed);
        let r = verify_theorem2(&spec, &Thm2Options { starts: 50, seed }).unwrap();
        assert!(r.passes, "seed {seed}: {r:?}");
        let best = r.best_root.unwrap();
        let err: f64 = best.w[..2]
            .iter()
            .zip(&spec.w_c_star)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = spec.w_c_star.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / scale < 1e-3);
        assert!(r.spurious_norm.unwrap() < 1e-3);
    }
}

#[test]
fn one_environment_short_is_flagged() {
    let spec = GaussianEnvSpecB::sample(2, 2, 4, &mut ChaCha8Rng::seed_from_u64(1));
    let r = verify_theorem2(&spec, &Thm2Options::default()).unwrap();
    assert!(!r.passes);
    assert!(!r.preconditions["k_gt_max_dc_plus_2_dsp"]);
}

#[test]
fn analytic_slope_matches_monte_carlo() {
    let spec = spec_b(3);
    let w = [0.7, -0.4, 0.3, 0.2];
    // the slope block is linear in t: r(t) = cov(f, y) - t var(f)
    let r1 = regression_residuals(&spec, &w, 1.0, 0.0, 0.0)
        .unwrap()
        .slope;
    let r2 = regression_residuals(&spec, &w, 2.0, 0.0, 0.0)
        .unwrap()
        .slope;
    let bundle = generate_setting_b(&spec, 20_000, 11).unwrap();
    for (i, env) in bundle.environments().iter().enumerate() {
        let var_f = r1[i] - r2[i];
        let cov = r1[i] + var_f;
        let analytic = cov / var_f;
        let f: Vec<f64> = env
            .features
            .iter()
            .map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum())
            .collect();
        let n = f.len() as f64;
        let (mf, my) = (
            f.iter().sum::<f64>() / n,
            env.labels.iter().sum::<f64>() / n,
        );
        let sff: f64 = f.iter().map(|v| (v - mf).powi(2)).sum();
        let sfy: f64 = f
            .iter()
            .zip(&env.labels)
            .map(|(a, b)| (a - mf) * (b - my))
            .sum();
        let slope = sfy / sff;
        let resid: f64 = f
            .iter()
            .zip(&env.labels)
            .map(|(a, b)| (b - my - slope * (a - mf)).powi(2))
            .sum();
        let se = (resid / (n - 2.0) / sff).sqrt();
        assert!(
            (slope - analytic).abs() < 3.0 * se,
            "env {i}: {slope} vs {analytic} (se {se})"
        );
    }
}

#[test]
fn rank_checks_ignore_a_common_scale() {
    let spec = spec_b(5);
    let mut scaled = spec.clone();
    for e in &mut scaled.envs {
        e.mu_c.iter_mut().for_each(|v| *v *= 7.0);
        e.mu_sp.iter_mut().for_each(|v| *v *= 7.0);
        e.sigma_c.iter_mut().flatten().for_each(|v| *v *= 7.0);
        e.sigma_sp.iter_mut().flatten().for_each(|v| *v *= 7.0);
    }
    let (a, _, ok_a) = theorem2_preconditions(&spec).unwrap();
    let (b, _, ok_b) = theorem2_preconditions(&scaled).unwrap();
    assert_eq!(a, b);
    assert_eq!(ok_a, ok_b);
}

#[test]
fn spurious_ratio_shrinks_as_lambda_grows() {
    let lambdas = [0.0, 1.0, 10.0, 100.0];
    let mut per_lambda = vec![Vec::new(); lambdas.len()];
    for seed in 0..10 {
        let spec = GaussianEnvSpecA::sample(3, 2, 5, 4.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut opts = Thm1Options {
            seed,
            lambdas: lambdas.to_vec(),
            ..Thm1Options::default()
        };
        opts.hyper.seed = seed;
        for (j, (_, r)) in train_clove_ratios(&spec, &opts)
            .unwrap()
            .into_iter()
            .enumerate()
        {
            per_lambda[j].push(r);
        }
    }
    let medians: Vec<f64> = per_lambda
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            0.5 * (v[4] + v[5])
        })
        .collect();
    assert!(medians.windows(2).all(|p| p[1] <= p[0]), "{medians:?}");
}
