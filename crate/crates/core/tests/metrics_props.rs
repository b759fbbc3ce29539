//! Metric ranges, ROUGE symmetry and bootstrap behavior.

use std::collections::BTreeSet;

use kgpath_core::metrics::{bootstrap_ci, rouge2, rouge_l, set_metrics, SetMetrics};
use proptest::prelude::*;

fn in_unit(m: &SetMetrics) -> bool {
    [m.recall, m.precision, m.f1]
        .iter()
        .all(|v| (0.0..=1.0).contains(v))
}

fn tokens() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..15)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn set_metrics_are_bounded(
        pred in prop::collection::btree_set(0u8..20, 0..10),
        gold in prop::collection::btree_set(0u8..20, 1..10),
    ) {
        let m = set_metrics(&pred, &gold).unwrap();
        prop_assert!(in_unit(&m));
        if m.recall + m.precision == 0.0 {
            prop_assert_eq!(m.f1, 0.0);
        }
        let hits = pred.intersection(&gold).count();
        prop_assert_eq!(m.recall == 0.0, hits == 0);
    }

    #[test]
    fn rouge_swaps_precision_and_recall(cand in tokens(), reference in tokens()) {
        for (fwd, back) in [
            (rouge2(&cand, &reference), rouge2(&reference, &cand)),
            (rouge_l(&cand, &reference), rouge_l(&reference, &cand)),
        ] {
            prop_assert!(in_unit(&fwd));
            prop_assert_eq!(fwd.precision, back.recall);
            prop_assert_eq!(fwd.recall, back.precision);
            prop_assert_eq!(fwd.f1, back.f1);
        }
    }

    #[test]
    fn rouge_l_is_one_only_for_identical_sequences(cand in tokens(), reference in tokens()) {
        prop_assume!(!cand.is_empty() && !reference.is_empty());
        let f = rouge_l(&cand, &reference).f1;
        prop_assert_eq!(f == 1.0, cand == reference);
        prop_assert_eq!(rouge_l(&cand, &cand).f1, 1.0);
    }

    #[test]
    fn bootstrap_brackets_the_mean(scores in prop::collection::vec(0.0f64..1.0, 2..60), seed in any::<u64>()) {
        let ci = bootstrap_ci(&scores, 300, 0.95, seed).unwrap();
        prop_assert!(ci.lower <= ci.mean && ci.mean <= ci.upper);
        prop_assert_eq!(ci, bootstrap_ci(&scores, 300, 0.95, seed).unwrap());
    }
}

#[test]
fn balanced_binary_scores_bracket_half_and_narrow_with_size() {
    let balanced = |k: usize| -> Vec<f64> { (0..2 * k).map(|i| (i % 2) as f64).collect() };
    let mut widths = Vec::new();
    for k in [50, 200, 800] {
        let ci = bootstrap_ci(&balanced(k), 1000, 0.95, 11).unwrap();
        assert!(ci.lower < 0.5 && 0.5 < ci.upper, "k={k}: {ci:?}");
        widths.push(ci.upper - ci.lower);
    }
    assert!(widths.windows(2).all(|w| w[1] < w[0]), "{widths:?}");
}

#[test]
fn disjoint_sets_score_zero() {
    let pred: BTreeSet<u8> = [1, 2].into();
    let gold: BTreeSet<u8> = [3].into();
    let m = set_metrics(&pred, &gold).unwrap();
    assert_eq!((m.recall, m.precision, m.f1), (0.0, 0.0, 0.0));
}
