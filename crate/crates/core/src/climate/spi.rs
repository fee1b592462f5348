//! Standardized precipitation index.
//!
//! Precipitation totals are fitted with a two-parameter gamma law on the
//! positive subsample (Thom's approximate maximum-likelihood estimator),
//! mixed with a point mass at zero, and the cumulative probability is mapped
//! to a standard-normal deviate by a rational approximation.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use super::ClimateError;

pub const MIN_HISTORY: usize = 30;
pub const SPI_LIMIT: f64 = 4.0;

const C0: f64 = 2.515517;
const C1: f64 = 0.802853;
const C2: f64 = 0.010328;
const D1: f64 = 1.432788;
const D2: f64 = 0.189269;
const D3: f64 = 0.001308;

/// Probabilities are kept this far from 0 and 1 before the normal transform.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub shape: f64,
    pub scale: f64,
    pub zero_fraction: f64,
    pub sample_size: usize,
}

/// Fitted law of a precipitation history. Histories whose positive values
/// are all equal cannot be fitted by a gamma and fall back to a step CDF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PrecipDistribution {
    Gamma(GammaFit),
    Step { value: f64, zero_fraction: f64 },
}

impl PrecipDistribution {
    pub fn from_history(history: &[f64]) -> Result<Self, ClimateError> {
        match fit_gamma(history) {
            Ok(fit) => Ok(Self::Gamma(fit)),
            Err(ClimateError::DegenerateSample { value, zero_fraction }) => Ok(Self::Step { value, zero_fraction }),
            Err(e) => Err(e),
        }
    }

    pub fn cdf(&self, x0: f64) -> f64 {
        match *self {
            Self::Gamma(fit) => gamma_cdf(&fit, x0),
            Self::Step { value, zero_fraction } => {
                if x0 >= value && value > 0.0 {
                    1.0
                } else if x0 >= 0.0 {
                    zero_fraction
                } else {
                    0.0
                }
            }
        }
    }

    pub fn spi(&self, x0: f64) -> f64 {
        spi_from_probability(self.cdf(x0))
    }
}

/// Fits the gamma law to the positive part of `history` with
/// `A = ln(mean) − mean(ln x)`, `shape = (1 + √(1 + 4A/3)) / 4A` and
/// `scale = mean / shape`.
pub fn fit_gamma(history: &[f64]) -> Result<GammaFit, ClimateError> {
    let n = history.len();
    if n < MIN_HISTORY {
        return Err(ClimateError::HistoryTooShort { n, min: MIN_HISTORY });
    }
    if let Some(&bad) = history.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(ClimateError::NegativePrecipitation(bad));
    }
    let positives: Vec<f64> = history.iter().copied().filter(|&x| x > 0.0).collect();
    let zero_fraction = (n - positives.len()) as f64 / n as f64;
    let degenerate = |value: f64| ClimateError::DegenerateSample { value, zero_fraction };
    let Some(&first) = positives.first() else {
        return Err(degenerate(0.0));
    };
    if positives.iter().all(|&x| x == first) {
        return Err(degenerate(first));
    }
    let m = positives.len() as f64;
    let mean = positives.iter().sum::<f64>() / m;
    let mean_log = positives.iter().map(|x| x.ln()).sum::<f64>() / m;
    let a = mean.ln() - mean_log;
    if !(a > 0.0) {
        return Err(degenerate(mean));
    }
    let shape = (1.0 + (1.0 + 4.0 * a / 3.0).sqrt()) / (4.0 * a);
    let scale = mean / shape;
    Ok(GammaFit { shape, scale, zero_fraction, sample_size: n })
}

/// Mixed CDF `q + (1 − q)·G(x0)` with `q` the zero fraction.
pub fn gamma_cdf(fit: &GammaFit, x0: f64) -> f64 {
    if x0 <= 0.0 {
        return if x0 == 0.0 { fit.zero_fraction } else { 0.0 };
    }
    let g = gamma_lr(fit.shape, x0 / fit.scale);
    fit.zero_fraction + (1.0 - fit.zero_fraction) * g
}

pub fn compute_spi(fit: &GammaFit, x0: f64) -> Result<f64, ClimateError> {
    if !(x0.is_finite() && x0 >= 0.0) {
        return Err(ClimateError::NegativePrecipitation(x0));
    }
    Ok(spi_from_probability(gamma_cdf(fit, x0)))
}

/// Rational approximation of the standard-normal quantile, clamped to ±4.
pub fn spi_from_probability(f: f64) -> f64 {
    let f = f.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let (sign, tail) = if f > 0.5 { (1.0, 1.0 - f) } else { (-1.0, f) };
    let t = (1.0 / (tail * tail)).ln().sqrt();
    let num = (C2 * t + C1) * t + C0;
    let den = ((D3 * t + D2) * t + D1) * t + 1.0;
    (sign * (t - num / den)).clamp(-SPI_LIMIT, SPI_LIMIT)
}
