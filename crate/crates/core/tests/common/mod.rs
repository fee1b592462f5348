//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use statrs::distribution::{Beta, Continuous, ContinuousCDF, Normal};

/// Standard-normal quantile by bisection on the erf-based CDF.
pub fn normal_quantile(p: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if n.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// AUC by counting every positive/negative pair; ties count one half.
pub fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice = 0u64;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &yi) in labels.iter().enumerate() {
        if yi == 1 {
            p += 1;
        } else {
            n += 1;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice as f64 / (2.0 * p as f64 * n as f64)
}

/// KS by scanning every distinct score as a threshold, in exact integer
/// arithmetic: max |#pos≤t · N − #neg≤t · P| / (P·N).
pub fn ks_brute(scores: &[f64], labels: &[u8]) -> f64 {
    let p = labels.iter().filter(|&&y| y == 1).count() as i64;
    let n = labels.len() as i64 - p;
    let mut best = 0i64;
    for &t in scores {
        let pos = scores.iter().zip(labels).filter(|(s, y)| **s <= t && **y == 1).count() as i64;
        let neg = scores.iter().zip(labels).filter(|(s, y)| **s <= t && **y == 0).count() as i64;
        best = best.max((pos * n - neg * p).abs());
    }
    best as f64 / (p as f64 * n as f64)
}

/// H-measure by trapezoidal integration over `grid` cost points, taking the
/// minimum loss over every raw ROC point (no hull).
pub fn h_oracle(scores: &[f64], labels: &[u8], grid: usize) -> f64 {
    let p = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n = labels.len() as f64 - p;
    let (pi1, pi0) = (p / (p + n), n / (p + n));
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut roc = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let tp = scores.iter().zip(labels).filter(|(s, y)| **s >= t && **y == 1).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, y)| **s >= t && **y == 0).count() as f64;
        roc.push((fp / n, tp / p));
    }
    let beta = Beta::new(pi1 + 1.0, pi0 + 1.0).unwrap();
    let integrate = |pts: &[(f64, f64)]| {
        let f = |c: f64| {
            let l = pts.iter().map(|&(fpr, tpr)| c * pi0 * fpr + (1.0 - c) * pi1 * (1.0 - tpr)).fold(f64::INFINITY, f64::min);
            l * beta.pdf(c)
        };
        let h = 1.0 / grid as f64;
        let mut s = 0.5 * (f(0.0) + f(1.0));
        for i in 1..grid {
            s += f(i as f64 * h);
        }
        s * h
    };
    1.0 - integrate(&roc) / integrate(&[(0.0, 0.0), (1.0, 1.0)])
}

/// Exact Shapley values of a set function over `m` players, by the subset
/// formula `Σ_S |S|!(m−|S|−1)!/m! · (v(S∪{i}) − v(S))` with `v` given on bitmasks.
pub fn shapley_brute(m: usize, v: impl Fn(usize) -> f64) -> Vec<f64> {
    let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>();
    let table: Vec<f64> = (0..1usize << m).map(&v).collect();
    (0..m)
        .map(|i| {
            (0..1usize << m)
                .filter(|s| s >> i & 1 == 0)
                .map(|s| {
                    let k = s.count_ones() as usize;
                    fact(k) * fact(m - k - 1) / fact(m) * (table[s | 1 << i] - table[s])
                })
                .sum()
        })
        .collect()
}
