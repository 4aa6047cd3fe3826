//! Library results against naive loop implementations on small random instances.

mod common;

const INSTANCES: u64 = 50;
const TOL: f64 = 1e-10;

#[test]
fn losses_and_metrics_match_naive_loops() {
    let mut worst: std::collections::BTreeMap<&str, (f64, u64)> = Default::default();
    for seed in 0..INSTANCES {
        for (name, err) in common::oracle_errors(seed) {
            let e = worst.entry(name).or_insert((0.0, seed));
            if !(err <= e.0) {
                *e = (err, seed);
            }
        }
    }
    for (name, (err, seed)) in &worst {
        assert!(*err < TOL, "{name}: error {err:e} at seed {seed}");
    }
    assert_eq!(worst.len(), 8);
}

#[test]
fn relational_is_intra_plus_cross() {
    use reldistill::losses::{cross_modal_loss, intra_modal_loss, relational_loss};
    for seed in 0..INSTANCES {
        let mut r = common::rng(seed);
        let k = common::unit_rows(&mut r, 7, 4);
        let q = common::unit_rows(&mut r, 7, 4);
        let rel = relational_loss(&k, &q).unwrap();
        let want = common::intra(&k, &q) + common::cross(&k, &q);
        assert!((rel.value - want).abs() < TOL);
        let ci = cross_modal_loss(&k, &q).unwrap().grad_k;
        let ii = intra_modal_loss(&k, &q).unwrap().grad_k;
        let sum: Vec<f64> = ci.iter().zip(&ii).map(|(a, b)| a + b).collect();
        assert!(common::max_abs_diff(&rel.grad_k, &sum) < 1e-14);
    }
}

#[test]
fn gram_matches_pairwise_dots() {
    use reldistill::numerics::gram;
    let mut r = common::rng(9);
    let a = common::raw_rows(&mut r, 6, 5);
    let b = common::raw_rows(&mut r, 6, 5);
    let g = gram(&a, &b).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let want: f64 = (0..5).map(|c| a.get(i, c) * b.get(j, c)).sum();
            assert!((g.get(i, j) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn normalize_backward_matches_finite_differences() {
    use reldistill::gradcheck::{finite_difference, relative_error};
    use reldistill::numerics::{normalize_rows, normalize_rows_backward};
    use reldistill::FeatureMatrix;
    for seed in 0..20 {
        let mut r = common::rng(100 + seed);
        let m = common::raw_rows(&mut r, 4, 3);
        let up = common::raw_rows(&mut r, 4, 3);
        let analytic = normalize_rows_backward(&m, up.as_slice()).unwrap();
        let numeric = finite_difference(m.as_slice(), 1e-6, |x| {
            let n = normalize_rows(&FeatureMatrix::new(4, 3, x.to_vec())?)?;
            Ok(n.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum())
        })
        .unwrap();
        assert!(relative_error(&analytic, &numeric) < 1e-7, "seed {seed}");
    }
}

// Every row identical: all logits tie, so each row contributes exactly log N.
// Averaging N copies of log N rounds, hence the few-ulp slack.
#[test]
fn contrastive_on_identical_pairs_is_log_n() {
    use reldistill::losses::{contrastive_loss, ContrastiveConfig};
    use reldistill::FeatureMatrix;
    for n in [1usize, 2, 3, 7, 8, 9, 16, 100] {
        let row = [0.6, 0.0, 0.8];
        let q = FeatureMatrix::new(n, 3, row.repeat(n)).unwrap();
        for tau in [1.0, 0.1, 0.01, 0.001] {
            let r = contrastive_loss(&q, &q, ContrastiveConfig::new(tau).unwrap()).unwrap();
            let want = (n as f64).ln();
            assert!((r.value - want).abs() <= 8.0 * f64::EPSILON * want, "n={n} tau={tau}: {}", r.value);
        }
    }
}
