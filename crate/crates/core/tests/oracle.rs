use fmn_core::oracle::{
    eval_table, exact_density_ratio, exact_mi, infonce_on_oracle, train_tabular, DiscreteJoint, OracleConfig,
};
use fmn_core::rng::{stream, Purpose};
use fmn_core::tensor::Tensor;
use proptest::prelude::*;
use proptest::strategy::ValueTree;

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn positive_joint() -> impl Strategy<Value = DiscreteJoint> {
    (2usize..6, 2usize..6).prop_flat_map(|(n, m)| {
        proptest::collection::vec(0.01..1.0f64, n * m).prop_map(move |w| {
            let s: f64 = w.iter().sum();
            DiscreteJoint::new(n, m, w.iter().map(|v| v / s).collect()).unwrap()
        })
    })
}

/// Log density ratio with zero cells mapped far below every finite score.
fn log_ratio(j: &DiscreteJoint) -> Tensor {
    exact_density_ratio(j)
        .unwrap()
        .map(|r| if r > 0.0 { r.ln() } else { -1e3 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mi_matches_entropy_decomposition(j in positive_joint()) {
        let h = entropy(&j.marginal_x()) + entropy(&j.marginal_z()) - entropy(j.table());
        prop_assert!((exact_mi(&j) - h).abs() < 1e-12);
        prop_assert!(exact_mi(&j) >= 0.0);
    }

    #[test]
    fn independent_joints_have_zero_mi(j in positive_joint()) {
        let outer = DiscreteJoint::outer(&j.marginal_x(), &j.marginal_z()).unwrap();
        prop_assert!(exact_mi(&outer).abs() < 1e-12);
        let r = exact_density_ratio(&outer).unwrap();
        prop_assert!(r.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn expected_log_ratio_is_mi(j in positive_joint()) {
        let r = exact_density_ratio(&j).unwrap();
        let e: f64 = j.table().iter().zip(r.data()).map(|(p, r)| p * r.ln()).sum();
        prop_assert!((e - exact_mi(&j)).abs() < 1e-12);
    }
}

/// The optimal critic's bound never exceeds the true MI.
#[test]
fn optimal_critic_bound_below_mi() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    for case in 0..20u64 {
        let j = positive_joint().new_tree(&mut runner).unwrap().current();
        for k in [2, 8, 32] {
            let b = eval_table(&j, &log_ratio(&j), k, 400, case, 0).unwrap();
            let mean = b.iter().sum::<f64>() / b.len() as f64;
            let se = fmn_core::metrics::std_error(&b);
            assert!(
                mean <= exact_mi(&j) + 3.0 * se,
                "case {case} K={k}: {mean} > {}",
                exact_mi(&j)
            );
        }
    }
}

/// On the uniform diagonal joint the optimal critic's objective for latent j
/// is `-log(1 + B)`, with `B ~ Binomial(K - 1, 1/n)` the other batch members
/// sharing its symbol, so the expected bound has a closed form.
fn diagonal_optimal_bound(n: usize, k: usize) -> f64 {
    let p = 1.0 / n as f64;
    let mut e = 0.0;
    let mut coef = 1.0f64; // C(k-1, b)
    for b in 0..k {
        if b > 0 {
            coef *= (k - b) as f64 / b as f64;
        }
        e += coef * p.powi(b as i32) * (1.0 - p).powi((k - 1 - b) as i32) * ((1 + b) as f64).ln();
    }
    (k as f64).ln() - e
}

#[test]
fn diagonal_optimal_bound_matches_binomial_formula() {
    for (n, k) in [(8, 32), (64, 8), (4, 2)] {
        let j = DiscreteJoint::diagonal(n).unwrap();
        let b = eval_table(&j, &log_ratio(&j), k, 4000, 1, 0).unwrap();
        let mean = b.iter().sum::<f64>() / b.len() as f64;
        let se = fmn_core::metrics::std_error(&b);
        let expect = diagonal_optimal_bound(n, k);
        assert!(
            (mean - expect).abs() < 3.0 * se,
            "n={n} K={k}: {mean} vs {expect} (se {se})"
        );
        assert!(expect <= exact_mi(&j).min((k as f64).ln()));
    }
}

#[test]
fn trained_table_approaches_the_optimum() {
    let j = DiscreteJoint::diagonal(8).unwrap();
    let cfg = OracleConfig {
        k: 32,
        ..OracleConfig::default()
    };
    let run = train_tabular(&j, &cfg, 0).unwrap();
    assert!(
        (run.bound - diagonal_optimal_bound(8, 32)).abs() < 0.02,
        "{}",
        run.bound
    );
}

/// More negatives per positive give a less noisy estimate.
#[test]
fn larger_batches_reduce_variance() {
    let j = DiscreteJoint::noisy_diagonal(4, 0.9).unwrap();
    let report = |k| {
        infonce_on_oracle(
            &j,
            "noisy",
            &OracleConfig {
                k,
                steps: 600,
                replicates: 10,
                ..OracleConfig::default()
            },
        )
        .unwrap()
    };
    let (r2, r32) = (report(2), report(32));
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    assert!(var(&r32.bounds) < var(&r2.bounds), "{:?} {:?}", r32.bounds, r2.bounds);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&r32.batch_variances) < mean(&r2.batch_variances));
}

#[test]
fn noisy_diagonal_has_known_mi() {
    // p_ii = 0.9/4, off-diagonal 0.1/12, uniform marginals.
    let j = DiscreteJoint::noisy_diagonal(4, 0.9).unwrap();
    let direct = 0.9 * (0.9f64 / 4.0 / (1.0 / 16.0)).ln() + 0.1 * (0.1f64 / 12.0 / (1.0 / 16.0)).ln();
    assert!((exact_mi(&j) - direct).abs() < 1e-12);
}

#[test]
fn joint_grammar() {
    assert!((exact_mi(&DiscreteJoint::parse("diagonal:8").unwrap()) - 8f64.ln()).abs() < 1e-12);
    assert_eq!(exact_mi(&DiscreteJoint::parse("product:4x4").unwrap()), 0.0);
    for bad in ["diag:8", "diagonal:0", "product:4", "product:ax2", "diagonal"] {
        assert!(DiscreteJoint::parse(bad).is_err(), "{bad}");
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("j.txt");
    std::fs::write(&p, "# two symbols\n0.5, 0\n0 0.5\n").unwrap();
    let j = DiscreteJoint::parse(&format!("file:{}", p.display())).unwrap();
    assert!((exact_mi(&j) - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn sampled_pairs_follow_the_joint() {
    let j = DiscreteJoint::noisy_diagonal(3, 0.7).unwrap();
    let pairs = j.sample_pairs(30_000, &mut stream(0, 0, 0, Purpose::Oracle));
    for (cell, p) in j.table().iter().enumerate() {
        let hits: Vec<f64> = pairs
            .iter()
            .map(|&(a, b)| f64::from(u8::from(a * 3 + b == cell)))
            .collect();
        let f = hits.iter().sum::<f64>() / hits.len() as f64;
        let se = (p * (1.0 - p) / hits.len() as f64).sqrt();
        assert!((f - p).abs() < 4.0 * se, "cell {cell}: {f} vs {p}");
    }
}
