//! Structured-feature preprocessing: mean/MISSING imputation, weight-of-
//! evidence binning, information-value screening and VIF elimination.
//!
//! Label 1 marks a defaulter ("bad"); WoE is `ln(p_good / p_bad)` per bin,
//! so bins that concentrate defaulters get negative values.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::loans::{LoanRecord, StructuredSchema};

pub const MISSING: &str = "MISSING";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("feature {0}: fewer than two bins realizable")]
    TooFewBins(String),
    #[error("expected {expected} rows, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("empty training set")]
    Empty,
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub n_bins: usize,
    pub smoothing: f64,
    pub iv_min: f64,
    pub iv_max: f64,
    pub vif_max: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { n_bins: 5, smoothing: 0.5, iv_min: 0.01, iv_max: 0.5, vif_max: 10.0 }
    }
}

/// A structured column after imputation.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Continuous(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Continuous(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training means of the continuous columns.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Imputer {
    pub means: BTreeMap<String, f64>,
}

impl Imputer {
    pub fn fit(train: &[LoanRecord], schema: &StructuredSchema) -> Self {
        let means = schema
            .continuous
            .iter()
            .map(|name| {
                let seen: Vec<f64> = train.iter().filter_map(|l| l.continuous.get(name).copied().flatten()).collect();
                let mean = if seen.is_empty() { 0.0 } else { seen.iter().sum::<f64>() / seen.len() as f64 };
                (name.clone(), mean)
            })
            .collect();
        Self { means }
    }

    pub fn continuous(&self, name: &str, values: &[Option<f64>]) -> Vec<f64> {
        let fill = self.means.get(name).copied().unwrap_or(0.0);
        impute_continuous(values, fill)
    }
}

pub fn impute_continuous(values: &[Option<f64>], mean: f64) -> Vec<f64> {
    values.iter().map(|v| v.unwrap_or(mean)).collect()
}

pub fn impute_categorical(values: &[Option<String>]) -> Vec<String> {
    values.iter().map(|v| v.clone().unwrap_or_else(|| MISSING.to_string())).collect()
}

/// Imputed columns of `loans`, in schema order.
pub fn impute(loans: &[LoanRecord], schema: &StructuredSchema, imputer: &Imputer) -> Vec<(String, Column)> {
    let mut out = Vec::new();
    for name in &schema.continuous {
        let raw: Vec<Option<f64>> = loans.iter().map(|l| l.continuous.get(name).copied().flatten()).collect();
        out.push((name.clone(), Column::Continuous(imputer.continuous(name, &raw))));
    }
    for name in &schema.categorical {
        let raw: Vec<Option<String>> = loans.iter().map(|l| l.categorical.get(name).cloned().flatten()).collect();
        out.push((name.clone(), Column::Categorical(impute_categorical(&raw))));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bins {
    /// Value `x` falls in bin `#{c in cuts : c < x}`.
    Continuous { cuts: Vec<f64> },
    /// Category to bin index; the MISSING bin is always present.
    Categorical { categories: BTreeMap<String, usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub feature: String,
    pub bins: Bins,
    pub goods: Vec<u64>,
    pub bads: Vec<u64>,
    pub woe: Vec<f64>,
    pub smoothing: f64,
}

impl BinSpec {
    pub fn n_bins(&self) -> usize {
        self.woe.len()
    }

    pub fn bin_continuous(&self, x: f64) -> usize {
        match &self.bins {
            Bins::Continuous { cuts } => cuts.partition_point(|&c| c < x),
            Bins::Categorical { .. } => self.missing_bin(),
        }
    }

    pub fn bin_category(&self, c: &str) -> usize {
        match &self.bins {
            Bins::Categorical { categories } => categories.get(c).copied().unwrap_or_else(|| self.missing_bin()),
            Bins::Continuous { .. } => 0,
        }
    }

    fn missing_bin(&self) -> usize {
        match &self.bins {
            Bins::Categorical { categories } => categories[MISSING],
            Bins::Continuous { .. } => 0,
        }
    }

    /// Smoothed class shares per bin, `(p_good, p_bad)`.
    pub fn proportions(&self) -> (Vec<f64>, Vec<f64>) {
        smoothed_shares(&self.goods, &self.bads, self.smoothing)
    }

    pub fn encode(&self, column: &Column) -> Vec<f64> {
        match column {
            Column::Continuous(v) => v.iter().map(|&x| self.woe[self.bin_continuous(x)]).collect(),
            Column::Categorical(v) => v.iter().map(|c| self.woe[self.bin_category(c)]).collect(),
        }
    }
}

fn smoothed_shares(goods: &[u64], bads: &[u64], s: f64) -> (Vec<f64>, Vec<f64>) {
    let tg: f64 = goods.iter().map(|&g| g as f64 + s).sum();
    let tb: f64 = bads.iter().map(|&b| b as f64 + s).sum();
    (goods.iter().map(|&g| (g as f64 + s) / tg).collect(), bads.iter().map(|&b| (b as f64 + s) / tb).collect())
}

pub fn woe_value(p_good: f64, p_bad: f64) -> f64 {
    (p_good / p_bad).ln()
}

/// Equal-frequency cut points taken from the sorted sample itself, with
/// duplicates removed.
pub fn quantile_cuts(values: &[f64], n_bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut cuts: Vec<f64> = (1..n_bins)
        .filter_map(|k| {
            let idx = (k * n).div_ceil(n_bins);
            (idx >= 1).then(|| sorted[idx - 1])
        })
        .collect();
    cuts.dedup();
    // a cut at the maximum leaves an empty top bin
    if cuts.last() == sorted.last() {
        cuts.pop();
    }
    cuts
}

pub fn fit_woe(feature: &str, column: &Column, labels: &[u8], cfg: &FeatureConfig) -> Result<BinSpec, FeatureError> {
    if column.len() != labels.len() {
        return Err(FeatureError::LengthMismatch { expected: labels.len(), got: column.len() });
    }
    if labels.is_empty() {
        return Err(FeatureError::Empty);
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(FeatureError::SingleClass);
    }
    let (bins, assign): (Bins, Vec<usize>) = match column {
        Column::Continuous(v) => {
            let cuts = quantile_cuts(v, cfg.n_bins);
            let assign = v.iter().map(|&x| cuts.partition_point(|&c| c < x)).collect();
            (Bins::Continuous { cuts }, assign)
        }
        Column::Categorical(v) => {
            let mut categories: BTreeMap<String, usize> = BTreeMap::new();
            let mut names: Vec<&str> = v.iter().map(String::as_str).chain([MISSING]).collect();
            names.sort_unstable();
            names.dedup();
            for (i, n) in names.into_iter().enumerate() {
                categories.insert(n.to_string(), i);
            }
            let assign = v.iter().map(|c| categories[c.as_str()]).collect();
            (Bins::Categorical { categories }, assign)
        }
    };
    let n_bins = match &bins {
        Bins::Continuous { cuts } => cuts.len() + 1,
        Bins::Categorical { categories } => categories.len(),
    };
    let mut goods = vec![0u64; n_bins];
    let mut bads = vec![0u64; n_bins];
    for (&b, &y) in assign.iter().zip(labels) {
        if y == 1 {
            bads[b] += 1;
        } else {
            goods[b] += 1;
        }
    }
    if goods.iter().zip(&bads).filter(|(g, b)| **g + **b > 0).count() < 2 {
        return Err(FeatureError::TooFewBins(feature.to_string()));
    }
    let (pg, pb) = smoothed_shares(&goods, &bads, cfg.smoothing);
    let woe = pg.iter().zip(&pb).map(|(&g, &b)| woe_value(g, b)).collect();
    Ok(BinSpec { feature: feature.to_string(), bins, goods, bads, woe, smoothing: cfg.smoothing })
}

pub fn information_value(spec: &BinSpec) -> f64 {
    let (pg, pb) = spec.proportions();
    pg.iter().zip(&pb).zip(&spec.woe).map(|((g, b), w)| (g - b) * w).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SelectionStatus {
    IvLow,
    IvHigh,
    Vif,
    Kept,
}

impl SelectionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::IvLow => "IV_LOW",
            Self::IvHigh => "IV_HIGH",
            Self::Vif => "VIF",
            Self::Kept => "KEPT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub feature: String,
    pub iv: f64,
    /// VIF at removal time, or the final VIF of a kept feature.
    pub vif: Option<f64>,
    pub status: SelectionStatus,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionReport {
    pub rows: Vec<SelectionRow>,
}

impl SelectionReport {
    pub fn retained(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().filter(|r| r.status == SelectionStatus::Kept).map(|r| r.feature.as_str())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), FeatureError> {
        let err = |e: csv::Error| FeatureError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["feature", "iv", "vif", "status"]).map_err(err)?;
        for r in &self.rows {
            let vif = match r.vif {
                Some(v) if v.is_infinite() => "inf".to_string(),
                Some(v) => v.to_string(),
                None => String::new(),
            };
            w.write_record([r.feature.as_str(), &r.iv.to_string(), &vif, r.status.as_str()]).map_err(err)?;
        }
        w.flush().map_err(|e| FeatureError::Io(e.to_string()))
    }
}

/// R² at or above this is treated as exact collinearity.
const COLLINEAR_R2: f64 = 1.0 - 1e-10;

/// VIF of column `j` against all other columns, with intercept.
fn vif_of(columns: &[&[f64]], j: usize) -> f64 {
    let n = columns[j].len();
    let y = DVector::from_column_slice(columns[j]);
    let mean = y.mean();
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if sst <= 0.0 {
        return f64::INFINITY;
    }
    let others: Vec<&[f64]> = columns.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, c)| *c).collect();
    let x = DMatrix::from_fn(n, others.len() + 1, |r, c| if c == 0 { 1.0 } else { others[c - 1][r] });
    let svd = x.clone().svd(true, true);
    let beta = svd.solve(&y, 1e-12).expect("u and v requested");
    let resid = &y - &x * beta;
    let r2 = 1.0 - resid.norm_squared() / sst;
    if r2 >= COLLINEAR_R2 {
        f64::INFINITY
    } else {
        1.0 / (1.0 - r2)
    }
}

/// All VIFs of a set of named columns.
pub fn vifs(columns: &[&[f64]]) -> Vec<f64> {
    (0..columns.len()).map(|j| vif_of(columns, j)).collect()
}

/// Repeatedly drops the highest-VIF feature while any VIF exceeds
/// `vif_max`. Equal VIFs drop the lexicographically larger name.
pub fn vif_filter(names: &[String], columns: &[Vec<f64>], vif_max: f64) -> Vec<(String, f64, bool)> {
    let mut alive: Vec<usize> = (0..names.len()).collect();
    let mut out: Vec<Option<(f64, bool)>> = vec![None; names.len()];
    loop {
        let cols: Vec<&[f64]> = alive.iter().map(|&i| columns[i].as_slice()).collect();
        let v = if alive.len() > 1 { vifs(&cols) } else { vec![1.0; alive.len()] };
        let worst = (0..alive.len()).max_by(|&a, &b| {
            v[a].total_cmp(&v[b]).then_with(|| names[alive[a]].cmp(&names[alive[b]]))
        });
        match worst {
            Some(w) if v[w] > vif_max => {
                out[alive[w]] = Some((v[w], false));
                alive.remove(w);
            }
            _ => {
                for (k, &i) in alive.iter().enumerate() {
                    out[i] = Some((v[k], true));
                }
                break;
            }
        }
    }
    names.iter().cloned().zip(out).map(|(n, o)| {
        let (v, kept) = o.expect("every feature is resolved");
        (n, v, kept)
    }).collect()
}

/// Fitted preprocessing: imputation means and the retained WoE encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePipeline {
    pub schema: StructuredSchema,
    pub imputer: Imputer,
    pub specs: Vec<BinSpec>,
}

impl FeaturePipeline {
    /// Fits on training loans only and reports the screening outcome of
    /// every schema column.
    pub fn fit(
        train: &[LoanRecord],
        schema: &StructuredSchema,
        cfg: &FeatureConfig,
    ) -> Result<(Self, SelectionReport), FeatureError> {
        if train.is_empty() {
            return Err(FeatureError::Empty);
        }
        let labels: Vec<u8> = train.iter().map(|l| l.label).collect();
        let imputer = Imputer::fit(train, schema);
        let columns = impute(train, schema, &imputer);
        let mut report = Vec::new();
        let mut candidates = Vec::new();
        for (name, col) in &columns {
            let spec = match fit_woe(name, col, &labels, cfg) {
                Ok(s) => s,
                Err(FeatureError::TooFewBins(_)) => {
                    report.push(SelectionRow { feature: name.clone(), iv: 0.0, vif: None, status: SelectionStatus::IvLow });
                    continue;
                }
                Err(e) => return Err(e),
            };
            let iv = information_value(&spec);
            let status = if iv <= cfg.iv_min {
                SelectionStatus::IvLow
            } else if iv >= cfg.iv_max {
                SelectionStatus::IvHigh
            } else {
                candidates.push((spec.encode(col), spec));
                SelectionStatus::Kept
            };
            report.push(SelectionRow { feature: name.clone(), iv, vif: None, status });
        }
        let names: Vec<String> = candidates.iter().map(|(_, s)| s.feature.clone()).collect();
        let encoded: Vec<Vec<f64>> = candidates.iter().map(|(e, _)| e.clone()).collect();
        let outcome = vif_filter(&names, &encoded, cfg.vif_max);
        let mut specs = Vec::new();
        for ((name, vif, kept), (_, spec)) in outcome.into_iter().zip(candidates) {
            let row = report.iter_mut().find(|r| r.feature == name).expect("reported above");
            row.vif = Some(vif);
            if kept {
                specs.push(spec);
            } else {
                row.status = SelectionStatus::Vif;
            }
        }
        Ok((Self { schema: schema.clone(), imputer, specs }, SelectionReport { rows: report }))
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.feature.clone()).collect()
    }

    /// WoE rows for `loans`, one column per retained feature. Labels are not read.
    pub fn transform(&self, loans: &[LoanRecord]) -> Vec<Vec<f64>> {
        let columns: BTreeMap<String, Column> = impute(loans, &self.schema, &self.imputer).into_iter().collect();
        let encoded: Vec<Vec<f64>> = self.specs.iter().map(|s| s.encode(&columns[&s.feature])).collect();
        (0..loans.len()).map(|i| encoded.iter().map(|c| c[i]).collect()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn imputation_examples() {
        assert_eq!(impute_continuous(&[Some(1.0), None, Some(3.0)], 2.0), [1.0, 2.0, 3.0]);
        let cats = impute_categorical(&[Some("A".into()), None, Some("B".into())]);
        assert_eq!(cats, ["A", MISSING, "B"]);
        assert_eq!(impute_continuous(&[Some(4.0), Some(5.0)], 0.0), [4.0, 5.0]);
    }

    #[test]
    fn woe_and_iv_hand_values() {
        assert!((woe_value(0.1, 0.5) - (-1.6094379)).abs() < 1e-6);
        assert_eq!(woe_value(0.3, 0.3), 0.0);
        // two bins with shares (0.8, 0.2) and (0.2, 0.8)
        let iv: f64 = [(0.8, 0.2), (0.2, 0.8)].iter().map(|&(g, b)| (g - b) * woe_value(g, b)).sum();
        assert!((iv - 1.2 * 4f64.ln()).abs() < 1e-12);
        assert!((iv - 1.664).abs() < 1e-3);
        let spec = BinSpec {
            feature: "x".into(),
            bins: Bins::Continuous { cuts: vec![0.0] },
            goods: vec![8000, 2000],
            bads: vec![2000, 8000],
            woe: vec![],
            smoothing: 0.5,
        };
        let (pg, pb) = spec.proportions();
        let spec = BinSpec { woe: pg.iter().zip(&pb).map(|(g, b)| woe_value(*g, *b)).collect(), ..spec };
        assert!((information_value(&spec) - 1.664).abs() < 1e-3);
    }

    #[test]
    fn high_default_bin_is_negative() {
        let col = Column::Categorical(vec!["a".into(), "a".into(), "a".into(), "b".into(), "b".into(), "b".into()]);
        let spec = fit_woe("c", &col, &[1, 1, 0, 0, 0, 0], &FeatureConfig::default()).unwrap();
        assert!(spec.woe[spec.bin_category("a")] < 0.0);
        assert!(spec.woe[spec.bin_category("b")] > 0.0);
        assert_eq!(spec.bin_category("zzz"), spec.bin_category(MISSING));
    }

    #[test]
    fn single_class_rejected() {
        let col = Column::Continuous(vec![1.0, 2.0, 3.0]);
        assert_eq!(fit_woe("x", &col, &[0, 0, 0], &FeatureConfig::default()), Err(FeatureError::SingleClass));
    }

    #[test]
    fn quantile_cuts_are_order_statistics() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(quantile_cuts(&v, 5), [2.0, 4.0, 6.0, 8.0]);
        assert_eq!(quantile_cuts(&[1.0; 7], 5), Vec::<f64>::new());
    }

    #[test]
    fn vif_examples() {
        let a = vec![1.0, -1.0, 1.0, -1.0];
        let b = vec![1.0, 1.0, -1.0, -1.0];
        let v = vifs(&[&a, &b]);
        assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let out = vif_filter(&names, &[a.clone(), b.clone(), a.clone()], 10.0);
        assert_eq!(out[2], ("c".to_string(), f64::INFINITY, false));
        assert!(out[0].2 && out[1].2);
    }

    /// Closed-form VIF for `p` equicorrelated features: the diagonal of the
    /// inverse correlation matrix.
    fn equicorrelated_vif(p: f64, rho: f64) -> f64 {
        (1.0 + (p - 2.0) * rho) / ((1.0 - rho) * (1.0 + (p - 1.0) * rho))
    }

    fn equicorrelated(rho: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let common: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        (0..3)
            .map(|_| common.iter().map(|c| rho.sqrt() * c + (1.0 - rho).sqrt() * normal(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn equicorrelated_vifs_match_closed_form() {
        let names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        // ρ = 0.9 gives VIF ≈ 6.79, below the threshold
        let cols = equicorrelated(0.9, 4000, 5);
        let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        let closed = equicorrelated_vif(3.0, 0.9);
        assert!((closed - 1.9 / 0.28).abs() < 1e-12);
        for v in vifs(&refs) {
            assert!((v - closed).abs() / closed < 0.1, "{v} vs {closed}");
        }
        assert!(vif_filter(&names, &cols, 10.0).iter().all(|r| r.2));
        // ρ = 0.95 gives VIF ≈ 13.4, so the filter must act
        assert!(equicorrelated_vif(3.0, 0.95) > 10.0);
        let cols = equicorrelated(0.95, 4000, 6);
        let out = vif_filter(&names, &cols, 10.0);
        assert!(out.iter().any(|r| !r.2));
        assert!(out.iter().filter(|r| r.2).all(|r| r.1 <= 10.0));
    }

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
