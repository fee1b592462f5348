mod common;

use climcredit::metrics::{all_metrics, auc, bootstrap_summary, h_measure, ks, ScoreSet};
use climcredit::rng::SeedSource;
use proptest::prelude::*;
use rand::Rng;

fn score_set() -> impl Strategy<Value = ScoreSet> {
    (2usize..200)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(prop_oneof![(0u32..20).prop_map(|k| k as f64 / 20.0), 0.0f64..1.0], n),
                prop::collection::vec(0u8..2, n),
            )
        })
        .prop_filter("both classes", |(_, y)| y.contains(&0) && y.contains(&1))
        .prop_map(|(s, y)| ScoreSet::new(s, y).unwrap())
}

/// Scores leaning toward the label by `signal`, on `n` loans.
fn scorer(n: usize, signal: f64, seed: u64) -> ScoreSet {
    let mut rng = SeedSource::new(seed).rng();
    let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 4 == 0)).collect();
    let scores = labels.iter().map(|&y| (signal * f64::from(y) + rng.gen::<f64>()) / (1.0 + signal)).collect();
    ScoreSet::new(scores, labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_and_ks_match_brute_force(s in score_set()) {
        prop_assert_eq!(auc(&s).unwrap(), common::auc_pairs(&s.scores, &s.labels));
        prop_assert_eq!(ks(&s).unwrap(), common::ks_brute(&s.scores, &s.labels));
        let [a, k, _] = all_metrics(&s).unwrap();
        prop_assert_eq!(a, auc(&s).unwrap());
        prop_assert_eq!(k, ks(&s).unwrap());
    }

    #[test]
    fn metrics_ignore_monotone_transforms(s in score_set()) {
        let moved = ScoreSet::new(s.scores.iter().map(|x| (x * x * 0.9 + 0.05).sqrt() * 0.5).collect(), s.labels.clone()).unwrap();
        let (a, b) = (all_metrics(&s).unwrap(), all_metrics(&moved).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12, "{a:?} vs {b:?}");
        }
        let h = h_measure(&s).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
    }
}

#[test]
fn h_matches_numerical_integration() {
    for seed in 0..10 {
        let s = scorer(40 + seed as usize * 7, 0.3 + 0.1 * seed as f64, seed);
        let got = h_measure(&s).unwrap();
        let want = common::h_oracle(&s.scores, &s.labels, 100_000);
        assert!((got - want).abs() < 1e-6, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn h_is_zero_for_label_free_scores_and_grows_with_agreement() {
    let labels: Vec<u8> = (0..200).map(|i| u8::from(i % 5 == 0)).collect();
    assert_eq!(h_measure(&ScoreSet::new(vec![0.4; 200], labels.clone()).unwrap()).unwrap(), 0.0);
    let base = scorer(400, 0.4, 3);
    let mut better = base.clone();
    // flip a tenth of the labels toward agreement with the scores
    let mut order: Vec<usize> = (0..400).collect();
    order.sort_by(|&a, &b| base.scores[b].total_cmp(&base.scores[a]));
    for &i in order.iter().take(40) {
        better.labels[i] = 1;
    }
    for &i in order.iter().rev().take(40) {
        better.labels[i] = 0;
    }
    assert!(h_measure(&better).unwrap() > h_measure(&base).unwrap());
}

#[test]
fn bootstrap_intervals_narrow_with_more_loans() {
    let width = |n| {
        let r = bootstrap_summary(&[scorer(n, 0.5, 8)], 300, 1).unwrap();
        r.summaries[0].ci_high - r.summaries[0].ci_low
    };
    assert!(width(5000) < width(500));
}
