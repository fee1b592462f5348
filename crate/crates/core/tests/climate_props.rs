mod common;

use climcredit::climate::{daily_drought, fit_gamma, monthly_ht, monthly_wlr, spi::compute_spi, spi_from_probability};
use proptest::prelude::*;

#[test]
fn spi_matches_normal_quantile_on_grid() {
    for i in 1..=999 {
        let f = i as f64 / 1000.0;
        let err = (spi_from_probability(f) - common::normal_quantile(f)).abs();
        assert!(err <= 4.5e-4, "F={f}: err {err}");
    }
}

proptest! {
    #[test]
    fn spi_matches_normal_quantile(f in 0.001f64..0.999) {
        prop_assert!((spi_from_probability(f) - common::normal_quantile(f)).abs() <= 4.5e-4);
    }

    #[test]
    fn spi_is_scale_invariant(
        history in prop::collection::vec(prop_oneof![Just(0.0), 0.1f64..500.0], 30..80),
        x0 in 0.0f64..800.0,
        k in 0.01f64..100.0,
    ) {
        let Ok(fit) = fit_gamma(&history) else { return Ok(()) };
        let scaled: Vec<f64> = history.iter().map(|v| v * k).collect();
        let fit_k = fit_gamma(&scaled).unwrap();
        let a = compute_spi(&fit, x0).unwrap();
        let b = compute_spi(&fit_k, x0 * k).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn drought_score_is_monotone(a in -6.0f64..-1.0, b in -6.0f64..-1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(daily_drought(lo) <= daily_drought(hi));
    }

    #[test]
    fn wlr_ignores_dry_day_order(
        precip in prop::collection::vec(prop_oneof![0.0f64..49.0, 50.0f64..300.0], 28..32),
        seed in any::<u64>(),
    ) {
        // shuffle only the dry days among dry positions
        let dry: Vec<usize> = (0..precip.len()).filter(|&i| precip[i] < 50.0).collect();
        let mut permuted = precip.clone();
        let mut vals: Vec<f64> = dry.iter().map(|&i| precip[i]).collect();
        if !vals.is_empty() {
            let r = (seed as usize) % vals.len();
            vals.rotate_left(r);
        }
        for (&i, v) in dry.iter().zip(vals) {
            permuted[i] = v;
        }
        prop_assert_eq!(monthly_wlr(&precip, 6).unwrap(), monthly_wlr(&permuted, 6).unwrap());
    }

    #[test]
    fn ht_is_zero_iff_no_trigger(
        tmax in prop::collection::vec(20.0f64..42.0, 30),
        tmin in prop::collection::vec(10.0f64..32.0, 30),
    ) {
        let ht = monthly_ht(&tmax, &tmin, 7).unwrap();
        let triggered = tmax.iter().any(|&t| t >= 35.0) || tmin.iter().any(|&t| t >= 25.0);
        prop_assert!(ht >= 0.0);
        prop_assert_eq!(ht > 0.0, triggered);
    }
}
