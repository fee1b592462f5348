mod common;

use climcredit::explain::{explain_model, kernel_shap, sample_background, CoalitionGame, ExplainError, FeatureLayout, ShapConfig};
use climcredit::rng::SeedSource;
use climcredit::trainer::{make_split, train, ModelConfig, ModelData, Split};
use climcredit::encoders::EncoderKind;
use proptest::prelude::*;
use rand::Rng;

/// Game given directly as a function of the coalition bitmask.
struct Table<F: Fn(usize) -> f64> {
    m: usize,
    f: F,
}

impl<F: Fn(usize) -> f64> CoalitionGame for Table<F> {
    fn n_players(&self) -> usize {
        self.m
    }

    fn values(&self, zs: &[Vec<bool>]) -> Result<Vec<f64>, ExplainError> {
        Ok(zs.iter().map(|z| (self.f)(z.iter().enumerate().fold(0, |acc, (j, &p)| acc | (usize::from(p) << j)))).collect())
    }
}

/// Interaction-heavy game whose last player is a dummy.
fn tangled(m: usize, coef: Vec<f64>) -> impl Fn(usize) -> f64 {
    move |s: usize| {
        let on = |j: usize| f64::from(u8::from(s >> j & 1 == 1));
        let mut v = 0.0;
        for j in 0..m - 1 {
            v += coef[j] * on(j);
            v += 0.5 * coef[(j + 1) % m] * on(j) * on((j + 1) % (m - 1));
        }
        v + (on(0) * on(2)).sqrt() * 0.7 - 0.3 * on(1) * on(3) * on(4 % (m - 1))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn exhaustive_matches_brute_force(m in 5usize..=12, coef in prop::collection::vec(-2.0f64..2.0, 12)) {
        let f = tangled(m, coef.clone());
        let want = common::shapley_brute(m, &f);
        let got = kernel_shap(&Table { m, f: tangled(m, coef) }, 1 << m, &mut SeedSource::new(0).rng()).unwrap();
        for (g, w) in got.values.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-9, "{g} vs {w}");
        }
        prop_assert!(got.values[m - 1].abs() <= 1e-9);
    }
}

#[test]
fn symmetric_players_get_equal_values() {
    let f = |s: usize| {
        let a = f64::from(u8::from(s & 1 == 1));
        let b = f64::from(u8::from(s & 2 == 2));
        let c = f64::from(u8::from(s & 4 == 4));
        (a + b).powi(2) + a * b * c + 0.2 * c
    };
    let got = kernel_shap(&Table { m: 3, f }, 64, &mut SeedSource::new(1).rng()).unwrap();
    assert!((got.values[0] - got.values[1]).abs() <= 1e-12);
}

#[test]
fn additive_game_is_exact_under_sampling() {
    let mut rng = SeedSource::new(2).rng();
    let a: Vec<f64> = (0..40).map(|j| if j % 7 == 0 { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect();
    let f = {
        let a = a.clone();
        move |s: usize| (0..40).filter(|j| s >> j & 1 == 1).map(|j| a[j].sin()).sum::<f64>()
    };
    let got = kernel_shap(&Table { m: 40, f }, 512, &mut rng).unwrap();
    for j in 0..40 {
        assert!((got.values[j] - a[j].sin()).abs() < 1e-9);
    }
}

fn toy(n: usize) -> ModelData {
    let mut rng = SeedSource::new(7).rng();
    let mut d = ModelData::default();
    for i in 0..n {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut panel = [[0.0; 4]; 12];
        for m in panel.iter_mut() {
            *m = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        }
        let y = u8::from(x[0] + panel[11][1] - 0.5 > 0.0);
        d.ids.push(format!("L{i}"));
        d.structured.push(x);
        d.climate.push(panel);
        d.text.push(vec![if y == 1 { "late" } else { "fine" }.to_string()]);
        d.labels.push(y);
    }
    d
}

#[test]
fn model_explanations_are_locally_accurate_and_skip_inactive_inputs() {
    let d = toy(120);
    let plan = make_split(&d.ids, &d.labels, 3).unwrap();
    let layout = FeatureLayout::new(&["a".into(), "b".into(), "c".into()]);
    for mask in ["S+C", "S+T"] {
        let cfg = ModelConfig {
            mask: mask.parse().unwrap(),
            encoder: EncoderKind::Gru,
            hidden_size: 4,
            text_embed_dim: 4,
            max_epochs: 2,
            batch_size: 16,
            seed: 1,
            ..ModelConfig::default()
        };
        let model = train(&cfg, &d, &plan).unwrap();
        let bg = sample_background(&plan.indices(&d.ids, Split::Train), 10, 4);
        let shap_cfg = ShapConfig { background: 10, budget: 128, seed: 5 };
        let res = explain_model(&model, &layout, &d, &[0, 1, 2], &bg, &shap_cfg).unwrap();
        for r in &res {
            let sum: f64 = r.values.iter().sum();
            assert!((r.base_value + sum - r.prediction).abs() <= 1e-3);
            let p = model.predict(&d.subset(&[d.ids.iter().position(|x| *x == r.loan_id).unwrap()])).unwrap()[0];
            assert!((p - r.prediction).abs() < 1e-12);
            if mask == "S+C" {
                assert_eq!(*r.values.last().unwrap(), 0.0);
            } else {
                assert!(r.values[3..51].iter().all(|v| *v == 0.0));
            }
        }
    }
}
