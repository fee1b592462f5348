//! Seeded synthetic weather, loans, officer texts and default labels with
//! planted structured, climate and text effects.

use std::collections::BTreeMap;

use chrono::{Datelike, Duration, NaiveDate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::climate::{
    compute_all_indices, rescale_rows, ClimateError, DailyWeather, IndexConfig, MonthlyIndexRow, StationMeta,
    DROUGHT_WEIGHTS, FREEZE_WEIGHTS,
};
use crate::loans::{LoanRecord, StructuredSchema};
use crate::panel::{build_panels, ClimatePanel, PanelError, FACTORS};
use crate::rng::SeedSource;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("default rate {target} unreachable")]
    RateUnreachable { target: f64 },
    #[error(transparent)]
    Climate(#[from] ClimateError),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

/// Logit coefficients of the planted default mechanism. `structured` and
/// `text` act on borrower quality and text sentiment (higher is safer), the
/// climate terms on the standardized 12-month mean of each factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Effects {
    pub structured: f64,
    pub wlr: f64,
    pub drought: f64,
    pub ht: f64,
    pub cf: f64,
    pub text: f64,
}

impl Default for Effects {
    fn default() -> Self {
        Self { structured: 1.0, wlr: 1.5, drought: 0.2, ht: 0.2, cf: 0.2, text: 0.8 }
    }
}

impl Effects {
    pub fn zero() -> Self {
        Self { structured: 0.0, wlr: 0.0, drought: 0.0, ht: 0.0, cf: 0.0, text: 0.0 }
    }

    fn climate(&self) -> [f64; FACTORS] {
        [self.drought, self.wlr, self.ht, self.cf]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextLengths {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
}

impl Default for TextLengths {
    fn default() -> Self {
        Self { min: 15, mean: 107.0, max: 326 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub n_loans: usize,
    pub default_rate: f64,
    pub n_stations: usize,
    pub weather_start_year: i32,
    pub weather_end_year: i32,
    pub loan_start: NaiveDate,
    pub loan_end: NaiveDate,
    pub effects: Effects,
    pub text_lengths: TextLengths,
    /// Chance that any one structured value is missing.
    pub missing_rate: f64,
    pub seed: u64,
}

pub const PAPER_LOANS: usize = 4172;
pub const PAPER_DEFAULT_RATE: f64 = 0.015;

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            n_loans: PAPER_LOANS,
            default_rate: PAPER_DEFAULT_RATE,
            n_stations: 12,
            weather_start_year: 2001,
            weather_end_year: 2023,
            loan_start: NaiveDate::from_ymd_opt(2022, 1, 1).expect("valid"),
            loan_end: NaiveDate::from_ymd_opt(2023, 12, 31).expect("valid"),
            effects: Effects::default(),
            text_lengths: TextLengths::default(),
            missing_rate: 0.02,
            seed: 0,
        }
    }
}

impl GenSpec {
    /// 4,000 loans at a 5% default rate.
    pub fn test_profile(seed: u64) -> Self {
        Self { n_loans: 4000, default_rate: 0.05, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.n_loans == 0 || self.n_stations == 0 {
            return bad("need at least one loan and one station");
        }
        if !(self.default_rate > 0.0 && self.default_rate < 1.0) {
            return bad("default_rate must lie in (0, 1)");
        }
        if self.weather_start_year + 20 > self.loan_start.year() || self.loan_end.year() > self.weather_end_year {
            return bad("weather must span 20 years before the loan window and cover it");
        }
        if self.loan_end < self.loan_start {
            return bad("loan_end precedes loan_start");
        }
        let e = &self.effects;
        if ![e.structured, e.wlr, e.drought, e.ht, e.cf, e.text].iter().all(|v| v.is_finite()) {
            return bad("effects must be finite");
        }
        let t = &self.text_lengths;
        if t.min == 0 || t.max < t.min || !(t.mean >= t.min as f64 && t.mean <= t.max as f64) {
            return bad("text lengths need 0 < min <= mean <= max");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Station locations and regional weights.
pub fn gen_stations(spec: &GenSpec) -> Vec<StationMeta> {
    let mut rng = SeedSource::new(spec.seed).stream("stations");
    (0..spec.n_stations)
        .map(|k| StationMeta {
            station_id: format!("ST{k:03}"),
            latitude: rng.gen_range(22.0..42.0),
            longitude: rng.gen_range(100.0..120.0),
            drought_region_weight: DROUGHT_WEIGHTS[rng.gen_range(0..DROUGHT_WEIGHTS.len())],
            freeze_region_weight: FREEZE_WEIGHTS[rng.gen_range(0..FREEZE_WEIGHTS.len())],
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Daily weather for one station: a seasonal temperature cycle with
/// monthly anomalies, gamma rainfall on wet days, occasional 50/100/200 mm
/// storms, and snow on freezing wet days.
pub fn gen_station_weather(spec: &GenSpec, station: &StationMeta, index: usize) -> Vec<DailyWeather> {
    let mut rng = SeedSource::new(spec.seed).child_index("weather", index as u64).rng();
    let lat = station.latitude;
    let base = 16.0 - 0.5 * (lat - 22.0);
    let amp = 10.0 + 0.3 * (lat - 22.0);
    let wetness = rng.gen_range(0.5..1.6);
    let storminess = rng.gen_range(0.001..0.02);
    let start = NaiveDate::from_ymd_opt(spec.weather_start_year, 1, 1).expect("valid");
    let end = NaiveDate::from_ymd_opt(spec.weather_end_year, 12, 31).expect("valid");
    let mut out = Vec::with_capacity((end - start).num_days() as usize + 1);
    let (mut cur_month, mut t_anom, mut p_anom) = (0u32, 0.0, 1.0);
    let mut day = start;
    while day <= end {
        if day.month() != cur_month {
            cur_month = day.month();
            t_anom = 1.5 * normal(&mut rng);
            p_anom = (0.5 * normal(&mut rng)).exp();
        }
        let season = (2.0 * std::f64::consts::PI * (day.ordinal() as f64 - 200.0) / 365.25).cos();
        let t_avg = base + amp * season + t_anom + 2.0 * normal(&mut rng);
        let t_max = t_avg + 3.5 + 0.8 * normal(&mut rng).abs();
        let t_min = t_avg - 3.5 - 0.8 * normal(&mut rng).abs();
        let wet_prob = (0.25 + 0.15 * season).clamp(0.02, 0.9);
        let mut precip = 0.0;
        if rng.gen::<f64>() < wet_prob {
            let scale = 8.0 * wetness * p_anom * (1.0 + 0.6 * season);
            precip = Gamma::new(0.7, scale.max(0.1)).expect("positive").sample(&mut rng);
        }
        if rng.gen::<f64>() < storminess * p_anom * (1.0 + season) {
            let u: f64 = rng.gen();
            precip += if u < 0.7 {
                rng.gen_range(50.0..100.0)
            } else if u < 0.92 {
                rng.gen_range(100.0..200.0)
            } else {
                rng.gen_range(200.0..260.0)
            };
        }
        out.push(DailyWeather { date: day, precip, t_max, t_min, t_avg, snow_day: t_avg < 0.0 && precip > 0.0 });
        day += Duration::days(1);
    }
    out
}

pub fn gen_weather(spec: &GenSpec, stations: &[StationMeta]) -> BTreeMap<String, Vec<DailyWeather>> {
    stations.iter().enumerate().map(|(k, s)| (s.station_id.clone(), gen_station_weather(spec, s, k))).collect()
}

const FILLER: [&str; 24] = [
    "lorem", "ipsum", "dolor", "amet", "visum", "domus", "officina", "mercatus", "familia", "ager", "negotium", "cliens",
    "annus", "mensis", "pecunia", "opus", "locus", "via", "merx", "emptor", "venditor", "forum", "tabula", "ratio",
];
const SUBJECTS: [&str; 6] = ["debitor", "officium", "inspector", "negotiator", "coniunx", "socius"];
pub const POSITIVE_TOKENS: [&str; 6] = ["probus", "solvens", "diligens", "prosperus", "fidus", "stabilis"];
pub const NEGATIVE_TOKENS: [&str; 6] = ["tardus", "debilis", "incertus", "egens", "periculosus", "moratus"];

/// Chance that a sentiment slot is positive for borrower quality `q`.
pub fn positive_share(q: f64) -> f64 {
    ((q + 3.0) / 6.0).clamp(0.0, 1.0)
}

/// An officer-assessment text: sentences of filler with one sentiment slot
/// each, positive with probability rising in `q`. Returns the tokens and
/// the sentiment score `(positive − negative) / slots`.
pub fn gen_text(q: f64, lengths: &TextLengths, rng: &mut ChaCha8Rng) -> (Vec<String>, f64) {
    let extra = (lengths.mean - lengths.min as f64).max(0.0);
    let len = if extra > 0.0 {
        let g: f64 = Gamma::new(2.0, extra / 2.0).expect("positive").sample(rng);
        (lengths.min as f64 + g).round() as usize
    } else {
        lengths.min
    }
    .clamp(lengths.min, lengths.max);
    let p = positive_share(q);
    let mut tokens = Vec::with_capacity(len + 12);
    let (mut pos, mut neg) = (0usize, 0usize);
    while tokens.len() < len {
        let words = rng.gen_range(5..11);
        let slot = rng.gen_range(1..words);
        tokens.push(SUBJECTS[rng.gen_range(0..SUBJECTS.len())].to_string());
        for w in 1..words {
            if w == slot {
                let good = rng.gen::<f64>() < p;
                let bank = if good { &POSITIVE_TOKENS } else { &NEGATIVE_TOKENS };
                tokens.push(bank[rng.gen_range(0..bank.len())].to_string());
                if tokens.len() <= len {
                    if good {
                        pos += 1;
                    } else {
                        neg += 1;
                    }
                }
            } else {
                tokens.push(FILLER[rng.gen_range(0..FILLER.len())].to_string());
            }
        }
        tokens.push(".".to_string());
    }
    tokens.truncate(len);
    let slots = (pos + neg).max(1) as f64;
    (tokens, (pos as f64 - neg as f64) / slots)
}

struct ContinuousSpec {
    name: &'static str,
    mean: f64,
    sd: f64,
    min: f64,
    max: f64,
    loading: f64,
    integer: bool,
    log: bool,
}

const fn cont(name: &'static str, mean: f64, sd: f64, min: f64, max: f64, loading: f64, integer: bool, log: bool) -> ContinuousSpec {
    ContinuousSpec { name, mean, sd, min, max, loading, integer, log }
}

/// Generated directly; `loan_term`, `monthly_revenue`, `rest_amount` and
/// `rest_interest` are derived separately.
const CONTINUOUS: [ContinuousSpec; 10] = [
    cont("age", 40.83, 8.43, 20.0, 64.0, 0.15, true, false),
    cont("annual_expense", 18306.0, 38162.4, 5456.7, 330000.0, -0.2, false, true),
    cont("annual_revenue", 179133.58, 150000.0, 32400.0, 2364000.0, 0.45, false, true),
    cont("bedrooms", 4.84, 2.59, 1.0, 16.0, 0.1, true, false),
    cont("family_members", 3.57, 0.93, 1.0, 9.0, 0.0, true, false),
    cont("family_workforce", 2.48, 0.77, 1.0, 8.0, 0.2, true, false),
    cont("floors", 1.72, 0.82, 1.0, 5.0, 0.1, true, false),
    cont("house_area", 174.85, 132.93, 50.0, 1064.7, 0.0, false, true),
    cont("loan_amount", 39368.12, 15665.3, 1000.0, 100000.0, -0.15, false, false),
    cont("rate_of_income", 12.65, 33.27, 2.0, 408.9, -0.4, false, true),
];

const CATEGORICAL: [(&str, &[&str], f64); 18] = [
    ("business_type", &["1", "2", "3"], 0.1),
    ("credit_rating", &["1", "2", "3", "4", "5", "Other"], 0.5),
    ("customer_type", &["New_cust", "Old_cust"], 0.2),
    ("degree", &["0", "4", "5", "9"], 0.1),
    ("education", &["10", "20", "30", "40", "50", "60", "70", "80", "90", "99"], 0.2),
    ("ethnic_group", &["A", "B", "C", "D", "E", "F", "G", "H", "I", "J"], 0.0),
    ("homeownership", &["1", "2", "3", "4", "5", "Other"], 0.25),
    ("house_type", &["Flat", "House"], 0.05),
    ("housekeeping", &["Bad", "Moderate", "Good"], 0.3),
    ("job_position", &["1", "2", "3", "4", "5", "Other"], 0.15),
    ("job_title", &["1", "2", "3", "4", "5", "Other"], 0.0),
    ("license_type", &["A", "C", "E", "F", "H", "O", "P", "Q", "S", "Z", "Other"], 0.1),
    ("marital_relationship", &["Bad", "Moderate", "Good", "Very good"], 0.3),
    ("marital_status", &["10", "21", "22", "23", "30", "40", "90"], 0.05),
    ("occupation", &["0", "1", "3", "4", "5", "8", "9", "X", "Y", "Z"], 0.1),
    ("postcode", &["153200", "065300", "164100", "325700", "410000", "510000", "610000", "710000", "810000", "830000", "850000", "900000"], 0.0),
    ("repay_type", &["A", "B", "C"], 0.1),
    ("verified_id", &["1", "2", "3", "4", "5", "6", "Other"], 0.05),
];

/// Fourteen continuous and eighteen categorical columns.
pub fn schema() -> StructuredSchema {
    let mut continuous: Vec<String> = CONTINUOUS.iter().map(|c| c.name.to_string()).collect();
    continuous.extend(["loan_term", "monthly_revenue", "rest_amount", "rest_interest"].map(String::from));
    StructuredSchema { continuous, categorical: CATEGORICAL.iter().map(|c| c.0.to_string()).collect() }
}

/// Ground truth behind one generated loan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoanTruth {
    pub loan_id: String,
    pub quality: f64,
    pub sentiment: f64,
    /// 12-month means of DI, WLR, HT, CF.
    pub climate_means: [f64; FACTORS],
    pub probability: f64,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub stations: Vec<StationMeta>,
    pub weather: BTreeMap<String, Vec<DailyWeather>>,
    /// Monthly indices rescaled onto [0, 10] per factor.
    pub indices: Vec<MonthlyIndexRow>,
    pub panels: Vec<ClimatePanel>,
    pub loans: Vec<LoanRecord>,
    pub schema: StructuredSchema,
    pub truth: Vec<LoanTruth>,
    pub alpha: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intercept whose mean default probability over `eta` equals `rate`.
pub fn calibrate_intercept(eta: &[f64], rate: f64) -> Result<f64, SynthError> {
    let mean_p = |a: f64| eta.iter().map(|e| sigmoid(a + e)).sum::<f64>() / eta.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    if eta.is_empty() || !(rate > 0.0 && rate < 1.0) || mean_p(lo) > rate || mean_p(hi) < rate {
        return Err(SynthError::RateUnreachable { target: rate });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn zscores(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    v.iter().map(|x| if sd > 0.0 { (x - m) / sd } else { 0.0 }).collect()
}

const TERMS: [(u32, f64); 7] = [(1, 0.02), (2, 0.04), (3, 0.2), (4, 0.6), (5, 0.1), (6, 0.03), (9, 0.01)];
const RATE_TOLERANCE: f64 = 0.1;
const MAX_LABEL_DRAWS: usize = 200;

/// Loans located near the stations with structured attributes, texts and
/// labels drawn from the planted logit. The intercept is calibrated so the
/// expected default rate matches the target; labels are redrawn until the
/// realized rate is within 10% of it.
pub fn gen_loans_and_labels(
    spec: &GenSpec,
    stations: &[StationMeta],
    indices: &[MonthlyIndexRow],
) -> Result<(Vec<LoanRecord>, Vec<ClimatePanel>, Vec<LoanTruth>, f64), SynthError> {
    let source = SeedSource::new(spec.seed);
    let mut rng = source.stream("loans");
    let window = (spec.loan_end - spec.loan_start).num_days();
    let std_normal = Normal::new(0.0, 1.0).expect("valid");
    let mut loans: Vec<LoanRecord> = (0..spec.n_loans)
        .map(|i| {
            let st = &stations[rng.gen_range(0..stations.len())];
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let term_months = TERMS
                .iter()
                .find(|(_, p)| {
                    acc += p;
                    u < acc
                })
                .map_or(4, |(t, _)| *t);
            LoanRecord {
                loan_id: format!("L{i:05}"),
                latitude: st.latitude + rng.gen_range(-0.2..0.2),
                longitude: st.longitude + rng.gen_range(-0.2..0.2),
                start_date: spec.loan_start + Duration::days(rng.gen_range(0..=window)),
                term_months,
                continuous: BTreeMap::new(),
                categorical: BTreeMap::new(),
                text: vec![],
                label: 0,
            }
        })
        .collect();
    let (panels, dropped) = build_panels(&loans, stations, indices)?;
    if let Some((_, e)) = dropped.into_iter().next() {
        return Err(e.into());
    }

    let mut truth = Vec::with_capacity(loans.len());
    let mut sentiments = Vec::with_capacity(loans.len());
    for (loan, panel) in loans.iter_mut().zip(&panels) {
        let q: f64 = normal(&mut rng);
        let z = |loading: f64, rng: &mut ChaCha8Rng| loading * q + (1.0 - loading * loading).sqrt() * normal(rng);
        let mut annual_revenue = 0.0;
        for c in &CONTINUOUS {
            let zi = z(c.loading, &mut rng);
            let mut v = if c.log {
                let s2 = (1.0 + (c.sd / c.mean).powi(2)).ln();
                (c.mean.ln() - s2 / 2.0 + s2.sqrt() * zi).exp()
            } else {
                c.mean + c.sd * zi
            };
            v = v.clamp(c.min, c.max);
            if c.integer {
                v = v.round();
            }
            if c.name == "annual_revenue" {
                annual_revenue = v;
            }
            loan.continuous.insert(c.name.to_string(), Some(v));
        }
        let monthly = (annual_revenue / 12.0 * (0.1 * normal(&mut rng)).exp()).clamp(7135.0, 91999.92);
        let rest = if rng.gen::<f64>() < 0.05 { (8.0 + 1.2 * normal(&mut rng)).exp().min(80000.0) } else { 0.0 };
        loan.continuous.insert("loan_term".into(), Some(f64::from(loan.term_months)));
        loan.continuous.insert("monthly_revenue".into(), Some(monthly));
        loan.continuous.insert("rest_amount".into(), Some(rest));
        loan.continuous.insert("rest_interest".into(), Some((rest * rng.gen_range(0.02..0.09)).min(6770.93)));
        for (name, cats, loading) in CATEGORICAL {
            let u = std_normal.cdf(z(loading, &mut rng));
            let k = ((u * cats.len() as f64) as usize).min(cats.len() - 1);
            loan.categorical.insert(name.to_string(), Some(cats[k].to_string()));
        }
        for v in loan.continuous.iter_mut().filter(|(k, _)| k.as_str() != "loan_term").map(|(_, v)| v) {
            if rng.gen::<f64>() < spec.missing_rate {
                *v = None;
            }
        }
        for v in loan.categorical.values_mut() {
            if rng.gen::<f64>() < spec.missing_rate {
                *v = None;
            }
        }
        let (tokens, sentiment) = gen_text(q, &spec.text_lengths, &mut rng);
        loan.text = tokens;
        sentiments.push(sentiment);
        let mut means = [0.0; FACTORS];
        for month in &panel.values {
            for f in 0..FACTORS {
                means[f] += month[f] / panel.values.len() as f64;
            }
        }
        truth.push(LoanTruth { loan_id: loan.loan_id.clone(), quality: q, sentiment, climate_means: means, probability: 0.0 });
    }

    let e = &spec.effects;
    let climate_z: Vec<Vec<f64>> =
        (0..FACTORS).map(|f| zscores(&truth.iter().map(|t| t.climate_means[f]).collect::<Vec<_>>())).collect();
    let sentiment_z = zscores(&sentiments);
    let eta: Vec<f64> = (0..truth.len())
        .map(|i| {
            let climate: f64 = e.climate().iter().enumerate().map(|(f, b)| b * climate_z[f][i]).sum();
            -e.structured * truth[i].quality + climate - e.text * sentiment_z[i]
        })
        .collect();
    let alpha = calibrate_intercept(&eta, spec.default_rate)?;
    for (t, et) in truth.iter_mut().zip(&eta) {
        t.probability = sigmoid(alpha + et);
    }
    let mut label_rng = source.stream("labels");
    let target = spec.default_rate * truth.len() as f64;
    for _ in 0..MAX_LABEL_DRAWS {
        let labels: Vec<u8> = truth.iter().map(|t| u8::from(label_rng.gen::<f64>() < t.probability)).collect();
        let realized = labels.iter().map(|&y| f64::from(y)).sum::<f64>();
        if (realized - target).abs() <= RATE_TOLERANCE * target && labels.contains(&0) && labels.contains(&1) {
            for (loan, y) in loans.iter_mut().zip(labels) {
                loan.label = y;
            }
            return Ok((loans, panels, truth, alpha));
        }
    }
    Err(SynthError::RateUnreachable { target: spec.default_rate })
}

/// Full dataset: stations, weather, rescaled indices, panels and loans.
pub fn generate(spec: &GenSpec) -> Result<SynthDataset, SynthError> {
    spec.validate()?;
    let stations = gen_stations(spec);
    let weather = gen_weather(spec, &stations);
    let cfg = IndexConfig {
        climatology_start: spec.weather_start_year,
        climatology_end: spec.weather_start_year + 19,
        ..IndexConfig::default()
    };
    let mut indices = compute_all_indices(&stations, &weather, &cfg)?;
    rescale_rows(&mut indices)?;
    let (loans, panels, truth, alpha) = gen_loans_and_labels(spec, &stations, &indices)?;
    Ok(SynthDataset { stations, weather, indices, panels, loans, schema: schema(), truth, alpha })
}
