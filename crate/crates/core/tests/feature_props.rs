use std::collections::BTreeMap;

use chrono::NaiveDate;
use climcredit::features::{fit_woe, information_value, Column, FeatureConfig, FeaturePipeline};
use climcredit::loans::{LoanRecord, StructuredSchema};
use proptest::prelude::*;

fn labels_strategy(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, n).prop_filter("two classes", |v| v.contains(&0) && v.contains(&1))
}

proptest! {
    #[test]
    fn woe_invariant_to_monotone_transform(
        (xs, labels) in (20usize..200).prop_flat_map(|n| (prop::collection::vec(-50.0f64..50.0, n), labels_strategy(n))),
    ) {
        let cfg = FeatureConfig::default();
        let Ok(a) = fit_woe("x", &Column::Continuous(xs.clone()), &labels, &cfg) else { return Ok(()) };
        let transformed: Vec<f64> = xs.iter().map(|x| (x / 10.0).exp() + 3.0 * x).collect();
        let b = fit_woe("x", &Column::Continuous(transformed.clone()), &labels, &cfg).unwrap();
        prop_assert_eq!(a.encode(&Column::Continuous(xs)), b.encode(&Column::Continuous(transformed)));
        prop_assert_eq!(information_value(&a), information_value(&b));
    }

    #[test]
    fn iv_invariant_to_category_relabeling(
        (cats, labels) in (10usize..150).prop_flat_map(|n| (prop::collection::vec(0u8..5, n), labels_strategy(n))),
        shift in 1u8..5,
    ) {
        let cfg = FeatureConfig::default();
        let name = |c: u8| format!("c{c}");
        let a = fit_woe("c", &Column::Categorical(cats.iter().map(|&c| name(c)).collect()), &labels, &cfg).unwrap();
        let relabeled = Column::Categorical(cats.iter().map(|&c| name((c + shift) % 5)).collect());
        let b = fit_woe("c", &relabeled, &labels, &cfg).unwrap();
        prop_assert!((information_value(&a) - information_value(&b)).abs() < 1e-12);
        prop_assert!(information_value(&a) >= 0.0);
    }
}

fn loan(i: usize, x: f64, sector: &str, label: u8) -> LoanRecord {
    LoanRecord {
        loan_id: format!("L{i}"),
        latitude: 30.0,
        longitude: 110.0,
        start_date: NaiveDate::from_ymd_opt(2021, 5, 1).unwrap(),
        term_months: 6,
        continuous: BTreeMap::from([("x".to_string(), Some(x))]),
        categorical: BTreeMap::from([("sector".to_string(), Some(sector.to_string()))]),
        text: vec![],
        label,
    }
}

#[test]
fn held_out_labels_are_never_consulted() {
    let schema = StructuredSchema { continuous: vec!["x".into()], categorical: vec!["sector".into()] };
    let train: Vec<LoanRecord> = (0..400)
        .map(|i| {
            let x = (i % 37) as f64;
            let label = u8::from((i * 7) % 10 < 2 + (x > 20.0) as usize * 3);
            loan(i, x, ["a", "b", "c"][i % 3], label)
        })
        .collect();
    let (pipe, _) = FeaturePipeline::fit(&train, &schema, &FeatureConfig::default()).unwrap();
    let held: Vec<LoanRecord> = (0..50).map(|i| loan(i, i as f64 * 0.9, ["a", "d"][i % 2], 0)).collect();
    let poisoned: Vec<LoanRecord> = held.iter().map(|l| LoanRecord { label: 1 - l.label, ..l.clone() }).collect();
    assert_eq!(pipe.transform(&held), pipe.transform(&poisoned));
}
