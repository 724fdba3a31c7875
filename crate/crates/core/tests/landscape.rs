use mdcal::env_data::TwoBitEnvSpec;
use mdcal::landscape::{
    invariant_optimum, irmv1_common_zeros, population_loss, two_bit_population_penalties,
    DEFAULT_GRID,
};
use mdcal::metrics::KernelSpec;

fn e(a: f64, b: f64) -> TwoBitEnvSpec {
    TwoBitEnvSpec::new(a, b).unwrap()
}

#[test]
fn mmce_zeros_lie_on_the_invariant_diagonal_or_the_constant() {
    let envs = [e(0.1, 0.05), e(0.2, 0.05)];
    let l = two_bit_population_penalties(&envs, DEFAULT_GRID, &KernelSpec::default()).unwrap();
    let zeros = l.common_mmce_zeros(1e-6);
    assert!(zeros.contains(&(200, 200)));
    // invariant posterior 0.95 sits at grid index 380
    assert!(zeros.contains(&(380, 380)));
    for (i, j) in zeros {
        let diag = i.abs_diff(j) <= 1;
        let constant = i.abs_diff(200) <= 1 && j.abs_diff(200) <= 1;
        assert!(diag || constant, "({i},{j})");
    }
}

#[test]
fn irmv1_prefers_a_spurious_solution() {
    let envs = [e(0.1, 0.05), e(0.2, 0.05)];
    let test = e(0.9, 0.05);
    let inv = invariant_optimum(&envs).unwrap();
    let zeros = irmv1_common_zeros(&envs).unwrap();
    assert!(zeros
        .iter()
        .any(|z| (z.p1 - 0.95).abs() < 1e-8 && (z.p2 - 0.95).abs() < 1e-8));
    let train = |f| envs.iter().map(|s| population_loss(s, f)).sum::<f64>();
    let best = zeros
        .iter()
        .filter(|z| (z.p1 - z.p2).abs() > 1e-3)
        .min_by(|a, b| train(a).total_cmp(&train(b)))
        .expect("off-diagonal IRMv1 zero");
    // values from an independent root solve
    assert!(
        (best.p1 - 0.99320).abs() < 1e-4 && (best.p2 - 0.71180).abs() < 1e-4,
        "{best:?}"
    );
    assert!(train(best) < train(&inv));
    assert!(population_loss(&test, &inv) < population_loss(&test, best));
}
