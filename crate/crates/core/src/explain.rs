//! Kernel SHAP for the fusion models, uncertain-case selection, climate
//! factor attribution and per-factor ablation.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::climate::FACTOR_NAMES;
use crate::metrics::{bootstrap_summary, spearman_matrix, CorrelationMatrix, MetricError, ReportRow, ScoreSet};
use crate::panel::{FACTORS, PANEL_MONTHS};
use crate::rng::SeedSource;
use crate::trainer::{train, ModalityMask, ModelConfig, ModelData, Split, SplitPlan, TrainError, TrainedModel};

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("budget {budget} is below twice the {features} features")]
    BudgetTooSmall { budget: usize, features: usize },
    #[error("no loans fall inside the probability window")]
    EmptyWindow,
    #[error("vectors differ in length")]
    LengthMismatch,
    #[error("empty background set")]
    EmptyBackground,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("shap csv: {0}")]
    Io(String),
}

/// A cooperative game over `n_players` features: the expected model output
/// when only the features in a coalition take the explained instance's values.
pub trait CoalitionGame {
    fn n_players(&self) -> usize;
    /// Values of several coalitions at once; `true` marks a present feature.
    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>, ExplainError>;
}

/// Attributions for one instance over the game's players.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub base_value: f64,
    pub prediction: f64,
    pub values: Vec<f64>,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley kernel weight of one coalition of size `k` among `m` players.
pub fn shapley_kernel(m: usize, k: usize) -> f64 {
    (m - 1) as f64 / (binomial(m, k) * k as f64 * (m - k) as f64)
}

/// Kernel SHAP. Enumerates every proper coalition when that fits in
/// `budget`, otherwise draws `budget` coalitions in complementary pairs
/// with sizes proportional to their total kernel weight. The efficiency
/// constraint is imposed exactly.
pub fn kernel_shap<G: CoalitionGame, R: Rng>(game: &G, budget: usize, rng: &mut R) -> Result<Attribution, ExplainError> {
    let m = game.n_players();
    if budget < 2 * m {
        return Err(ExplainError::BudgetTooSmall { budget, features: m });
    }
    let ends = game.values(&[vec![false; m], vec![true; m]])?;
    let (base, fx) = (ends[0], ends[1]);
    if m <= 1 {
        return Ok(Attribution { base_value: base, prediction: fx, values: vec![fx - base; m] });
    }
    let exhaustive = m < usize::BITS as usize - 1 && (1usize << m) - 2 <= budget;
    let (coalitions, weights): (Vec<Vec<bool>>, Vec<f64>) = if exhaustive {
        (1..(1usize << m) - 1)
            .map(|bits| {
                let z: Vec<bool> = (0..m).map(|j| bits >> j & 1 == 1).collect();
                let k = bits.count_ones() as usize;
                (z, shapley_kernel(m, k))
            })
            .unzip()
    } else {
        let size_mass: Vec<f64> = (1..m).map(|k| 1.0 / (k * (m - k)) as f64).collect();
        let total: f64 = size_mass.iter().sum();
        let mut out = Vec::with_capacity(budget);
        for _ in 0..budget / 2 {
            let mut u = rng.gen::<f64>() * total;
            let mut k = m - 1;
            for (i, w) in size_mass.iter().enumerate() {
                if u < *w {
                    k = i + 1;
                    break;
                }
                u -= w;
            }
            let mut z = vec![false; m];
            for j in sample(rng, m, k) {
                z[j] = true;
            }
            let comp: Vec<bool> = z.iter().map(|b| !b).collect();
            out.push(z);
            out.push(comp);
        }
        let n = out.len();
        (out, vec![1.0; n])
    };
    let v = game.values(&coalitions)?;
    let delta = fx - base;
    // eliminate the last player through the efficiency constraint
    let last = m - 1;
    let mut a = DMatrix::<f64>::zeros(coalitions.len(), last);
    let mut b = DVector::<f64>::zeros(coalitions.len());
    for (r, (z, (&w, &vz))) in coalitions.iter().zip(weights.iter().zip(&v)).enumerate() {
        let sw = w.sqrt();
        let zl = f64::from(u8::from(z[last]));
        for j in 0..last {
            a[(r, j)] = sw * (f64::from(u8::from(z[j])) - zl);
        }
        b[r] = sw * (vz - base - zl * delta);
    }
    let phi = a.svd(true, true).solve(&b, 1e-12).map_err(|e| ExplainError::Io(e.to_string()))?;
    let mut values: Vec<f64> = phi.iter().copied().collect();
    values.push(delta - values.iter().sum::<f64>());
    Ok(Attribution { base_value: base, prediction: fx, values })
}

/// One column of the flattened explanation layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSlot {
    Structured(usize),
    Climate { factor: usize, month: usize },
    Text,
}

/// Structured columns, then the 48 climate cells ordered by factor and
/// month, then one grouped text feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayout {
    pub names: Vec<String>,
    pub slots: Vec<FeatureSlot>,
}

impl FeatureLayout {
    pub fn new(structured_names: &[String]) -> Self {
        let mut names: Vec<String> = structured_names.to_vec();
        let mut slots: Vec<FeatureSlot> = (0..structured_names.len()).map(FeatureSlot::Structured).collect();
        for (factor, fname) in FACTOR_NAMES.iter().enumerate() {
            for month in 0..PANEL_MONTHS {
                names.push(format!("{fname}_m{}", month as i32 - PANEL_MONTHS as i32));
                slots.push(FeatureSlot::Climate { factor, month });
            }
        }
        names.push("text".into());
        slots.push(FeatureSlot::Text);
        Self { names, slots }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Slots the model can read; everything else is provably inert.
    fn players(&self, model: &TrainedModel) -> Vec<usize> {
        let mask = model.mask();
        (0..self.len())
            .filter(|&i| match self.slots[i] {
                FeatureSlot::Structured(_) => mask.structured,
                FeatureSlot::Climate { factor, .. } => mask.climate && model.config.climate_factors.contains(&factor),
                FeatureSlot::Text => mask.text,
            })
            .collect()
    }

    fn value_of(&self, data: &ModelData, row: usize, slot: usize) -> f64 {
        match self.slots[slot] {
            FeatureSlot::Structured(j) => data.structured.get(row).map_or(f64::NAN, |r| r[j]),
            FeatureSlot::Climate { factor, month } => data.climate.get(row).map_or(f64::NAN, |p| p[month][factor]),
            FeatureSlot::Text => data.text.get(row).map_or(0.0, |t| t.len() as f64),
        }
    }
}

fn same_input(layout: &FeatureLayout, data: &ModelData, a: usize, b: usize, slot: usize) -> bool {
    match layout.slots[slot] {
        FeatureSlot::Text => data.text[a] == data.text[b],
        _ => layout.value_of(data, a, slot).to_bits() == layout.value_of(data, b, slot).to_bits(),
    }
}

/// Marginal-expectation game of a trained model around one instance.
pub struct ModelGame<'a> {
    model: &'a TrainedModel,
    layout: &'a FeatureLayout,
    players: Vec<usize>,
    data: &'a ModelData,
    instance: usize,
    background: &'a [usize],
}

const ROWS_PER_CALL: usize = 4096;

impl<'a> ModelGame<'a> {
    pub fn new(
        model: &'a TrainedModel,
        layout: &'a FeatureLayout,
        data: &'a ModelData,
        instance: usize,
        background: &'a [usize],
    ) -> Result<Self, ExplainError> {
        if background.is_empty() {
            return Err(ExplainError::EmptyBackground);
        }
        // a slot whose value matches every background row never changes a
        // composed input, so it is a null player with Shapley value zero
        let players = layout
            .players(model)
            .into_iter()
            .filter(|&slot| background.iter().any(|&bg| !same_input(layout, data, instance, bg, slot)))
            .collect();
        Ok(Self { model, layout, players, data, instance, background })
    }

    fn compose(&self, z: &[bool], bg: usize, out: &mut ModelData) {
        let d = self.data;
        out.ids.push(d.ids[bg].clone());
        out.labels.push(d.labels[bg]);
        let mut s = d.structured.get(bg).cloned();
        let mut c = d.climate.get(bg).copied();
        let mut t = d.text.get(bg).cloned();
        for (&present, &slot) in z.iter().zip(&self.players) {
            if !present {
                continue;
            }
            match self.layout.slots[slot] {
                FeatureSlot::Structured(j) => s.as_mut().expect("structured input")[j] = d.structured[self.instance][j],
                FeatureSlot::Climate { factor, month } => {
                    c.as_mut().expect("climate input")[month][factor] = d.climate[self.instance][month][factor]
                }
                FeatureSlot::Text => t = Some(d.text[self.instance].clone()),
            }
        }
        out.structured.extend(s);
        out.climate.extend(c);
        out.text.extend(t);
    }
}

impl CoalitionGame for ModelGame<'_> {
    fn n_players(&self) -> usize {
        self.players.len()
    }

    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>, ExplainError> {
        let nb = self.background.len();
        let per_call = (ROWS_PER_CALL / nb).max(1);
        let mut out = Vec::with_capacity(coalitions.len());
        for chunk in coalitions.chunks(per_call) {
            let mut rows = ModelData::default();
            for z in chunk {
                for &bg in self.background {
                    self.compose(z, bg, &mut rows);
                }
            }
            let p = self.model.predict(&rows)?;
            out.extend(p.chunks(nb).map(|c| c.iter().sum::<f64>() / nb as f64));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapConfig {
    pub background: usize,
    pub budget: usize,
    pub seed: u64,
}

impl Default for ShapConfig {
    fn default() -> Self {
        Self { background: 100, budget: 2048, seed: 0 }
    }
}

/// Explanation of one loan over the full layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapResult {
    pub loan_id: String,
    pub base_value: f64,
    pub prediction: f64,
    pub values: Vec<f64>,
    pub feature_values: Vec<f64>,
}

/// Uniform sample of up to `n` rows from `pool`.
pub fn sample_background(pool: &[usize], n: usize, seed: u64) -> Vec<usize> {
    let mut rng = SeedSource::new(seed).stream("background");
    let mut picked: Vec<usize> = sample(&mut rng, pool.len(), n.min(pool.len())).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

/// Kernel SHAP for rows `instances` of `data`. Features of inactive
/// modalities or unused climate factors are reported as exactly zero.
pub fn explain_model(
    model: &TrainedModel,
    layout: &FeatureLayout,
    data: &ModelData,
    instances: &[usize],
    background: &[usize],
    cfg: &ShapConfig,
) -> Result<Vec<ShapResult>, ExplainError> {
    let source = SeedSource::new(cfg.seed);
    instances
        .iter()
        .map(|&i| {
            let game = ModelGame::new(model, layout, data, i, background)?;
            let mut rng = source.child_index("shap", i as u64).rng();
            let a = kernel_shap(&game, cfg.budget, &mut rng)?;
            let mut values = vec![0.0; layout.len()];
            for (&slot, v) in game.players.iter().zip(&a.values) {
                values[slot] = *v;
            }
            Ok(ShapResult {
                loan_id: data.ids[i].clone(),
                base_value: a.base_value,
                prediction: a.prediction,
                values,
                feature_values: (0..layout.len()).map(|s| layout.value_of(data, i, s)).collect(),
            })
        })
        .collect()
}

pub fn write_shap_csv<W: Write>(writer: W, layout: &FeatureLayout, results: &[ShapResult]) -> Result<(), ExplainError> {
    let err = |e: csv::Error| ExplainError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["loan_id", "feature", "factor", "month_offset", "feature_value", "shap_value", "base_value"]).map_err(err)?;
    for r in results {
        for (s, name) in layout.names.iter().enumerate() {
            let (factor, offset) = match layout.slots[s] {
                FeatureSlot::Climate { factor, month } => {
                    (FACTOR_NAMES[factor].to_string(), (month as i32 - PANEL_MONTHS as i32).to_string())
                }
                _ => (String::new(), String::new()),
            };
            w.write_record([
                r.loan_id.clone(),
                name.clone(),
                factor,
                offset,
                r.feature_values[s].to_string(),
                r.values[s].to_string(),
                r.base_value.to_string(),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| ExplainError::Io(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertainCaseSet {
    pub loan_ids: Vec<String>,
    pub improvements: Vec<f64>,
    pub window: (f64, f64),
    /// Probability bounds of the window.
    pub bounds: (f64, f64),
    pub top_k: usize,
    /// Every structured-only probability was identical.
    pub degenerate: bool,
}

/// Loans whose structured-only probability falls in the percentile
/// `window` and whose combined-model probability moved toward the true
/// label, ranked by the size of that move.
pub fn select_uncertain_cases(
    ids: &[String],
    structured: &[f64],
    combined: &[f64],
    labels: &[u8],
    window: (f64, f64),
    top_k: usize,
) -> Result<UncertainCaseSet, ExplainError> {
    let n = ids.len();
    if structured.len() != n || combined.len() != n || labels.len() != n {
        return Err(ExplainError::LengthMismatch);
    }
    let mut sorted = structured.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = crate::metrics::percentile(&sorted, window.0);
    let hi = crate::metrics::percentile(&sorted, window.1);
    let inside: Vec<usize> = (0..n).filter(|&i| structured[i] >= lo && structured[i] <= hi).collect();
    if inside.is_empty() {
        return Err(ExplainError::EmptyWindow);
    }
    let mut gains: Vec<(usize, f64)> = inside
        .into_iter()
        .map(|i| {
            let y = f64::from(labels[i]);
            (i, (structured[i] - y).abs() - (combined[i] - y).abs())
        })
        .filter(|(_, g)| *g > 0.0)
        .collect();
    gains.sort_by(|a, b| b.1.total_cmp(&a.1).then(ids[a.0].cmp(&ids[b.0])));
    gains.truncate(top_k);
    Ok(UncertainCaseSet {
        loan_ids: gains.iter().map(|(i, _)| ids[*i].clone()).collect(),
        improvements: gains.iter().map(|(_, g)| *g).collect(),
        window,
        bounds: (lo, hi),
        top_k,
        degenerate: sorted.first() == sorted.last(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub factor: String,
    pub mean_abs: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodSummary {
    pub factor: String,
    pub month_offset: i32,
    pub mean_abs: f64,
    pub mean: f64,
    /// `(shap, feature value)` per explained loan.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorAttribution {
    pub factors: Vec<FactorSummary>,
    pub periods: Vec<PeriodSummary>,
}

impl FactorAttribution {
    /// Factor names by descending mean |SHAP|.
    pub fn ranking(&self) -> Vec<String> {
        let mut f = self.factors.clone();
        f.sort_by(|a, b| b.mean_abs.total_cmp(&a.mean_abs));
        f.into_iter().map(|s| s.factor).collect()
    }

    pub fn write_factors_csv<W: Write>(&self, writer: W) -> Result<(), ExplainError> {
        let mut w = csv::Writer::from_writer(writer);
        for f in &self.factors {
            w.serialize(f).map_err(|e| ExplainError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| ExplainError::Io(e.to_string()))
    }

    pub fn write_periods_csv<W: Write>(&self, writer: W) -> Result<(), ExplainError> {
        let err = |e: csv::Error| ExplainError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["factor", "month_offset", "mean_abs", "mean", "n"]).map_err(err)?;
        for p in &self.periods {
            w.write_record([
                p.factor.clone(),
                p.month_offset.to_string(),
                p.mean_abs.to_string(),
                p.mean.to_string(),
                p.points.len().to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| ExplainError::Io(e.to_string()))
    }
}

/// Mean |SHAP| and signed mean per factor (over months and loans) and per
/// factor-month cell.
pub fn factor_attribution(layout: &FeatureLayout, results: &[ShapResult]) -> FactorAttribution {
    let mut periods = Vec::with_capacity(FACTORS * PANEL_MONTHS);
    let mut factors = Vec::with_capacity(FACTORS);
    for (factor, fname) in FACTOR_NAMES.iter().enumerate() {
        let mut all = Vec::new();
        for month in 0..PANEL_MONTHS {
            let slot = layout.slots.iter().position(|s| *s == FeatureSlot::Climate { factor, month }).expect("full layout");
            let points: Vec<(f64, f64)> = results.iter().map(|r| (r.values[slot], r.feature_values[slot])).collect();
            all.extend(points.iter().map(|p| p.0));
            periods.push(PeriodSummary {
                factor: fname.to_string(),
                month_offset: month as i32 - PANEL_MONTHS as i32,
                mean_abs: mean(points.iter().map(|p| p.0.abs())),
                mean: mean(points.iter().map(|p| p.0)),
                points,
            });
        }
        factors.push(FactorSummary {
            factor: fname.to_string(),
            mean_abs: mean(all.iter().map(|v| v.abs())),
            mean: mean(all.iter().copied()),
        });
    }
    FactorAttribution { factors, periods }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    /// Bootstrap summaries for `S` and each `S+factor` model.
    pub rows: Vec<ReportRow>,
    /// Spearman agreement of first-seed test probabilities, `S` first.
    pub correlations: CorrelationMatrix,
}

/// Trains the structured-only model and one structured-plus-single-factor
/// model per climate factor for every seed, then bootstraps their test
/// metrics and cross-correlates their predictions.
pub fn per_factor_ablation(
    base: &ModelConfig,
    data: &ModelData,
    plan: &SplitPlan,
    seeds: &[u64],
    resamples: usize,
    bootstrap_seed: u64,
) -> Result<AblationReport, ExplainError> {
    let test = plan.indices(&data.ids, Split::Test);
    let test_data = data.subset(&test);
    let mut variants: Vec<(String, ModelConfig)> =
        vec![("S".into(), ModelConfig { mask: ModalityMask::new(true, false, false)?, ..base.clone() })];
    for (f, name) in FACTOR_NAMES.iter().enumerate() {
        let mask = ModalityMask::new(true, true, false)?;
        variants.push((format!("S+{}", name.to_uppercase()), ModelConfig { mask, climate_factors: vec![f], ..base.clone() }));
    }
    let mut rows = Vec::new();
    let mut first_seed = Vec::new();
    for (name, cfg) in &variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let model = train(&ModelConfig { seed, ..cfg.clone() }, data, plan)?;
            runs.push(ScoreSet::new(model.predict(&test_data)?, test_data.labels.clone())?);
        }
        let boot = bootstrap_summary(&runs, resamples, bootstrap_seed)?;
        rows.extend(boot.summaries.into_iter().map(|s| ReportRow {
            model: format!("{}", cfg.encoder),
            modality: name.clone(),
            metric: s.metric,
            mean: s.mean,
            ci_low: s.ci_low,
            ci_high: s.ci_high,
        }));
        first_seed.push(runs.first().map(|r| r.scores.clone()).unwrap_or_default());
    }
    let names: Vec<String> = variants.iter().map(|v| v.0.clone()).collect();
    let correlations = spearman_matrix(&names, &first_seed)?;
    Ok(AblationReport { rows, correlations })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `f(x) = Σ w_j x_j` on a fixed single background row.
    struct Linear {
        w: Vec<f64>,
        x: Vec<f64>,
        b: Vec<f64>,
    }

    impl CoalitionGame for Linear {
        fn n_players(&self) -> usize {
            self.w.len()
        }

        fn values(&self, zs: &[Vec<bool>]) -> Result<Vec<f64>, ExplainError> {
            Ok(zs
                .iter()
                .map(|z| z.iter().enumerate().map(|(j, &p)| self.w[j] * if p { self.x[j] } else { self.b[j] }).sum())
                .collect())
        }
    }

    #[test]
    fn linear_game_has_closed_form_values() {
        let mut rng = SeedSource::new(1).rng();
        for m in [3, 10, 30] {
            let g = Linear {
                w: (0..m).map(|j| if j == 1 { 0.0 } else { rng.gen_range(-2.0..2.0) }).collect(),
                x: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                b: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            let a = kernel_shap(&g, 256.max(2 * m), &mut rng).unwrap();
            for j in 0..m {
                assert!((a.values[j] - g.w[j] * (g.x[j] - g.b[j])).abs() < 1e-9, "m={m} j={j}");
            }
            assert!(a.values[1].abs() < 1e-9);
            assert!((a.base_value + a.values.iter().sum::<f64>() - a.prediction).abs() < 1e-12);
        }
    }

    #[test]
    fn budget_must_cover_twice_the_features() {
        let g = Linear { w: vec![1.0; 5], x: vec![1.0; 5], b: vec![0.0; 5] };
        let err = kernel_shap(&g, 9, &mut SeedSource::new(0).rng()).unwrap_err();
        assert!(matches!(err, ExplainError::BudgetTooSmall { budget: 9, features: 5 }));
    }

    #[test]
    fn kernel_weights_are_symmetric() {
        assert_eq!(shapley_kernel(5, 1), shapley_kernel(5, 4));
        assert!((shapley_kernel(4, 2) - 3.0 / (6.0 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn case_selection_example() {
        let ids: Vec<String> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        let s = [0.1, 0.5, 0.5, 0.5, 0.9];
        let c = [0.1, 0.7, 0.4, 0.45, 0.9];
        let y = [0, 1, 1, 0, 1];
        let set = select_uncertain_cases(&ids, &s, &c, &y, (0.3, 0.7), 10).unwrap();
        assert_eq!(set.loan_ids, ["b", "d"]);
        assert!((set.improvements[0] - 0.2).abs() < 1e-12);
        assert!(!set.degenerate);
        let flat = select_uncertain_cases(&ids, &[0.4; 5], &c, &y, (0.3, 0.7), 2).unwrap();
        assert!(flat.degenerate);
        assert!(flat.loan_ids.len() <= 2);
    }

    #[test]
    fn zero_shap_gives_zero_factor_means() {
        let layout = FeatureLayout::new(&["x".into()]);
        assert_eq!(layout.len(), 1 + 48 + 1);
        let r = ShapResult {
            loan_id: "L".into(),
            base_value: 0.3,
            prediction: 0.3,
            values: vec![0.0; layout.len()],
            feature_values: vec![1.0; layout.len()],
        };
        let fa = factor_attribution(&layout, &[r.clone(), r]);
        assert_eq!(fa.periods.len(), 48);
        assert!(fa.factors.iter().all(|f| f.mean_abs == 0.0 && f.mean == 0.0));
    }
}
