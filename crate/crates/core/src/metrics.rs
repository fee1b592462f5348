//! Discrimination metrics, bootstrap summaries and rank agreement.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::rng::SeedSource;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("scores need both classes")]
    SingleClass,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {0} outside [0, 1] or not finite")]
    InvalidScore(f64),
    #[error("vectors differ in length")]
    RaggedVectors,
    #[error("report csv: {0}")]
    Io(String),
}

/// Predicted default probabilities with their labels (1 = default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricError> {
        if scores.len() != labels.len() {
            return Err(MetricError::LengthMismatch { scores: scores.len(), labels: labels.len() });
        }
        if let Some(&bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(MetricError::InvalidScore(bad));
        }
        Ok(Self { scores, labels })
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        (pos, self.labels.len() - pos)
    }
}

/// One ROC vertex per distinct score, from the highest score down, as
/// cumulative (false positives, true positives). Starts at (0, 0).
fn roc_counts(scores: &[f64], labels: &[u8]) -> Result<(Vec<(u64, u64)>, u64, u64), MetricError> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut pts = vec![(0, 0)];
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(k + 1).map_or(true, |&j| scores[j] != scores[i]);
        if last_of_tie {
            pts.push((fp, tp));
        }
    }
    if tp == 0 || fp == 0 {
        return Err(MetricError::SingleClass);
    }
    Ok((pts, tp, fp))
}

fn checked(s: &ScoreSet) -> Result<(), MetricError> {
    if s.scores.len() != s.labels.len() {
        return Err(MetricError::LengthMismatch { scores: s.scores.len(), labels: s.labels.len() });
    }
    Ok(())
}

/// Area under the ROC curve from average ranks (Mann–Whitney).
pub fn auc(s: &ScoreSet) -> Result<f64, MetricError> {
    checked(s)?;
    let (pos, neg) = s.class_counts();
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let ranks = average_ranks(&s.scores);
    let rank_sum: f64 = ranks.iter().zip(&s.labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Largest gap between the class-conditional score CDFs.
pub fn ks(s: &ScoreSet) -> Result<f64, MetricError> {
    checked(s)?;
    let (pts, p, n) = roc_counts(&s.scores, &s.labels)?;
    Ok(ks_from_roc(&pts, p, n))
}

fn ks_from_roc(pts: &[(u64, u64)], p: u64, n: u64) -> f64 {
    let best = pts.iter().map(|&(fp, tp)| (tp as i128 * n as i128 - fp as i128 * p as i128).unsigned_abs()).max().unwrap_or(0);
    best as f64 / (p as f64 * n as f64)
}

/// Upper-left convex hull of ROC points `(fpr, tpr)` sorted by fpr.
fn roc_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &pt in points {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (b.0 - a.0) * (pt.1 - a.1) - (b.1 - a.1) * (pt.0 - a.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(pt);
    }
    hull
}

/// Expected minimum loss `∫ min_k [c·π0·fpr_k + (1−c)·π1·(1−tpr_k)] dBeta(c; a, b)`
/// over hull vertices ordered by increasing fpr.
fn expected_min_loss(hull: &[(f64, f64)], pi0: f64, pi1: f64, a: f64, b: f64) -> f64 {
    // Vertex k is optimal for c between the breakpoints it shares with its neighbours.
    let m = hull.len();
    let mut upper = 1.0;
    let mut total = 0.0;
    for k in 0..m {
        let lower = if k + 1 < m {
            let dt = pi1 * (hull[k + 1].1 - hull[k].1);
            let df = pi0 * (hull[k + 1].0 - hull[k].0);
            if dt + df > 0.0 { dt / (dt + df) } else { upper }
        } else {
            0.0
        };
        let lower = lower.min(upper);
        if upper > lower {
            let (fpr, tpr) = hull[k];
            // loss = c·(π0·fpr − π1·(1−tpr)) + π1·(1−tpr)
            let slope = pi0 * fpr - pi1 * (1.0 - tpr);
            let icept = pi1 * (1.0 - tpr);
            let mass = beta_reg(a, b, upper) - beta_reg(a, b, lower);
            let first = a / (a + b) * (beta_reg(a + 1.0, b, upper) - beta_reg(a + 1.0, b, lower));
            total += slope * first + icept * mass;
        }
        upper = lower;
    }
    total
}

/// Hand's H-measure with a Beta(π1+1, π0+1) cost-weight distribution,
/// where π1 is the default share.
pub fn h_measure(s: &ScoreSet) -> Result<f64, MetricError> {
    checked(s)?;
    let (pts, p, n) = roc_counts(&s.scores, &s.labels)?;
    Ok(h_from_roc(&pts, p, n))
}

fn h_from_roc(pts: &[(u64, u64)], p: u64, n: u64) -> f64 {
    let total = (p + n) as f64;
    let (pi1, pi0) = (p as f64 / total, n as f64 / total);
    let (a, b) = h_beta_params(pi0, pi1);
    let roc: Vec<(f64, f64)> = pts.iter().map(|&(fp, tp)| (fp as f64 / n as f64, tp as f64 / p as f64)).collect();
    let hull = roc_hull(&roc);
    let lmin = expected_min_loss(&hull, pi0, pi1, a, b);
    let lmax = expected_min_loss(&[(0.0, 0.0), (1.0, 1.0)], pi0, pi1, a, b);
    (1.0 - lmin / lmax).clamp(0.0, 1.0)
}

/// Cost-distribution parameters for class priors `(π0, π1)`.
pub fn h_beta_params(pi0: f64, pi1: f64) -> (f64, f64) {
    (pi1 + 1.0, pi0 + 1.0)
}

/// AUC, KS and H from a single sort.
pub fn all_metrics(s: &ScoreSet) -> Result<[f64; 3], MetricError> {
    checked(s)?;
    let (pts, p, n) = roc_counts(&s.scores, &s.labels)?;
    // trapezoids over integer counts: twice the area is exact
    let twice: u128 = pts.windows(2).map(|w| (w[1].0 - w[0].0) as u128 * (w[0].1 + w[1].1) as u128).sum();
    let auc = twice as f64 / (2.0 * p as f64 * n as f64);
    Ok([auc, ks_from_roc(&pts, p, n), h_from_roc(&pts, p, n)])
}

pub const METRIC_NAMES: [&str; 3] = ["AUC", "KS", "H"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub estimates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub summaries: Vec<MetricSummary>,
    /// Raw estimates per metric, in [`METRIC_NAMES`] order.
    pub estimates: [Vec<f64>; 3],
    pub skipped: usize,
}

pub const MAX_REDRAWS: usize = 100;

/// Percentile bootstrap over fixed predictions. `runs` holds one score set
/// per training seed; each gets `resamples` with-replacement draws from its
/// own substream of `seed`. A draw lacking a class is redrawn up to
/// [`MAX_REDRAWS`] times, then skipped.
pub fn bootstrap_summary(runs: &[ScoreSet], resamples: usize, seed: u64) -> Result<BootstrapResult, MetricError> {
    let master = SeedSource::new(seed);
    let mut estimates: [Vec<f64>; 3] = Default::default();
    let mut skipped = 0;
    for (r, run) in runs.iter().enumerate() {
        all_metrics(run)?;
        let n = run.scores.len();
        let mut rng = master.child_index("bootstrap", r as u64).rng();
        let mut draw = ScoreSet { scores: vec![0.0; n], labels: vec![0; n] };
        for _ in 0..resamples {
            let mut got = None;
            for _ in 0..=MAX_REDRAWS {
                for k in 0..n {
                    let i = rng.gen_range(0..n);
                    draw.scores[k] = run.scores[i];
                    draw.labels[k] = run.labels[i];
                }
                if let Ok(m) = all_metrics(&draw) {
                    got = Some(m);
                    break;
                }
            }
            match got {
                Some(m) => m.iter().zip(estimates.iter_mut()).for_each(|(v, e)| e.push(*v)),
                None => {
                    log::warn!("bootstrap run {r}: resample lacked a class after {MAX_REDRAWS} redraws; skipped");
                    skipped += 1;
                }
            }
        }
    }
    let summaries = METRIC_NAMES
        .iter()
        .zip(&estimates)
        .map(|(name, e)| {
            let mut sorted = e.clone();
            sorted.sort_by(f64::total_cmp);
            MetricSummary {
                metric: name.to_string(),
                mean: e.iter().sum::<f64>() / e.len().max(1) as f64,
                ci_low: percentile(&sorted, 0.025),
                ci_high: percentile(&sorted, 0.975),
                estimates: e.len(),
            }
        })
        .collect();
    Ok(BootstrapResult { summaries, estimates, skipped })
}

/// Linear-interpolation percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation; `None` when either vector is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Pairs whose correlation was undefined and recorded as 0.
    pub undefined: Vec<(usize, usize)>,
}

pub fn spearman_matrix(names: &[String], vectors: &[Vec<f64>]) -> Result<CorrelationMatrix, MetricError> {
    if names.len() != vectors.len() || vectors.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(MetricError::RaggedVectors);
    }
    let k = vectors.len();
    let mut values = vec![vec![0.0; k]; k];
    let mut undefined = Vec::new();
    for i in 0..k {
        values[i][i] = 1.0;
        for j in i + 1..k {
            let r = spearman(&vectors[i], &vectors[j]).unwrap_or_else(|| {
                undefined.push((i, j));
                0.0
            });
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix { names: names.to_vec(), values, undefined })
}

impl CorrelationMatrix {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), MetricError> {
        let err = |e: csv::Error| MetricError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(std::iter::once("model").chain(self.names.iter().map(String::as_str))).map_err(err)?;
        for (name, row) in self.names.iter().zip(&self.values) {
            w.write_record(std::iter::once(name.clone()).chain(row.iter().map(|v| format!("{v:.6}")))).map_err(err)?;
        }
        w.flush().map_err(|e| MetricError::Io(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub modality: String,
    pub metric: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn write_report<W: Write>(writer: W, rows: &[ReportRow]) -> Result<(), MetricError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(|e| MetricError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| MetricError::Io(e.to_string()))
}
