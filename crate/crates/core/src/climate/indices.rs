//! Monthly drought, water-logging, high-temperature and freezing indices.

use serde::{Deserialize, Serialize};

use super::ClimateError;

pub const WET_DAY_MM: f64 = 50.0;
pub const HOT_DAY_C: f64 = 35.0;
pub const HOT_NIGHT_C: f64 = 25.0;
pub const PENTADS: usize = 6;

/// Daily drought score from SPI. Non-positive, continuous at every breakpoint.
pub fn daily_drought(spi: f64) -> f64 {
    if spi >= -1.0 {
        0.0
    } else if spi >= -1.5 {
        spi + 1.0
    } else if spi >= -2.0 {
        2.0 * spi + 2.5
    } else {
        3.0 * spi + 4.5
    }
}

/// Seasonal drought weight for a calendar month.
pub fn drought_month_weight(month: u32) -> f64 {
    match month {
        5..=9 => 1.5,
        3 | 4 | 10 | 11 => 1.0,
        _ => 0.5,
    }
}

pub fn wlr_month_weight(month: u32) -> f64 {
    if (6..=8).contains(&month) {
        2.0
    } else {
        1.0
    }
}

pub fn cf_month_weight(month: u32) -> f64 {
    match month {
        12 => 1.0,
        1 | 2 => 2.0,
        _ => 0.5,
    }
}

fn check_month(month: u32) -> Result<(), ClimateError> {
    if (1..=12).contains(&month) {
        Ok(())
    } else {
        Err(ClimateError::InvalidMonth(month))
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), ClimateError> {
    if expected == got {
        Ok(())
    } else {
        Err(ClimateError::LengthMismatch { expected, got })
    }
}

/// Drought severity of one month, reported as the negated weighted sum of
/// daily scores over days above freezing.
pub fn monthly_drought(daily_spi: &[f64], daily_tavg: &[f64], a_i: f64, month: u32) -> Result<f64, ClimateError> {
    check_month(month)?;
    check_len(daily_spi.len(), daily_tavg.len())?;
    let b = drought_month_weight(month);
    let raw: f64 = daily_spi
        .iter()
        .zip(daily_tavg)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&s, _)| daily_drought(s) * a_i * b)
        .sum();
    // avoid emitting -0.0
    Ok(if raw == 0.0 { 0.0 } else { -raw })
}

/// Lengths of the run of consecutive `true` values ending at each position.
fn running_streaks(flags: impl Iterator<Item = bool>) -> Vec<u32> {
    let mut n = 0;
    flags
        .map(|f| {
            n = if f { n + 1 } else { 0 };
            n
        })
        .collect()
}

pub fn monthly_wlr(daily_precip: &[f64], month: u32) -> Result<f64, ClimateError> {
    check_month(month)?;
    if let Some(&p) = daily_precip.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(ClimateError::NegativePrecipitation(p));
    }
    if daily_precip.is_empty() {
        return Ok(0.0);
    }
    let streaks = running_streaks(daily_precip.iter().map(|&p| p >= WET_DAY_MM));
    let total: f64 = daily_precip
        .iter()
        .zip(&streaks)
        .map(|(&p, &n)| {
            let k = if p >= 200.0 {
                3.0
            } else if p >= 100.0 {
                2.0
            } else if p >= WET_DAY_MM {
                1.0
            } else {
                0.0
            };
            k * (n as f64).powi(2)
        })
        .sum();
    Ok(total / daily_precip.len() as f64 * wlr_month_weight(month))
}

fn hot_day_level(t_max: f64) -> f64 {
    if t_max >= 40.0 {
        3.0
    } else if t_max >= 37.0 {
        2.0
    } else if t_max >= HOT_DAY_C {
        1.0
    } else {
        0.0
    }
}

fn hot_night_level(t_min: f64) -> f64 {
    if t_min >= 30.0 {
        3.0
    } else if t_min >= 28.0 {
        2.0
    } else if t_min >= HOT_NIGHT_C {
        1.0
    } else {
        0.0
    }
}

pub fn monthly_ht(daily_tmax: &[f64], daily_tmin: &[f64], month: u32) -> Result<f64, ClimateError> {
    check_month(month)?;
    check_len(daily_tmax.len(), daily_tmin.len())?;
    if daily_tmax.is_empty() {
        return Ok(0.0);
    }
    let day_streaks = running_streaks(daily_tmax.iter().map(|&t| t >= HOT_DAY_C));
    let night_streaks = running_streaks(daily_tmin.iter().map(|&t| t >= HOT_NIGHT_C));
    let days: f64 = daily_tmax.iter().zip(&day_streaks).map(|(&t, &d)| hot_day_level(t) * (d as f64).sqrt()).sum();
    let nights: f64 =
        daily_tmin.iter().zip(&night_streaks).map(|(&t, &d)| hot_night_level(t) * (d as f64).sqrt()).sum();
    Ok((days + nights) / daily_tmax.len() as f64)
}

/// Mean and standard deviation of one pentad's average temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PentadStats {
    pub mean: f64,
    pub std: f64,
}

/// Anomaly class of a standardized pentad temperature.
pub fn cold_anomaly_class(z: f64) -> u8 {
    if z > -1.0 {
        0
    } else if z > -2.0 {
        1
    } else if z > -3.0 {
        2
    } else {
        3
    }
}

pub fn monthly_cf(
    pentad_means: &[f64; PENTADS],
    climatology: &[PentadStats; PENTADS],
    snow_days: &[u32; PENTADS],
    d_i: f64,
    month: u32,
) -> Result<f64, ClimateError> {
    check_month(month)?;
    let mut total = 0.0;
    for ((&t, stats), &snow) in pentad_means.iter().zip(climatology).zip(snow_days) {
        if !(stats.std > 0.0) {
            continue;
        }
        let z = (t - stats.mean) / stats.std;
        let a = cold_anomaly_class(z) as f64;
        total += a * z.abs() * (1.0 + snow as f64 / 10.0) * d_i;
    }
    Ok(total * cf_month_weight(month))
}

/// Index of the pentad holding a day of the month (1-based day).
pub fn pentad_of_day(day: u32) -> usize {
    (((day.max(1) - 1) / 5) as usize).min(PENTADS - 1)
}

/// Affine min-max map onto [0, 10] fitted on a reference range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexScaler {
    pub min: f64,
    pub max: f64,
}

impl IndexScaler {
    pub fn fit(reference: &[f64]) -> Option<Self> {
        let min = reference.iter().copied().fold(f64::INFINITY, f64::min);
        let max = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (min.is_finite() && max.is_finite()).then_some(Self { min, max })
    }

    pub fn apply(&self, v: f64) -> f64 {
        if !(self.max > self.min) {
            return 0.0;
        }
        (10.0 * (v - self.min) / (self.max - self.min)).clamp(0.0, 10.0)
    }
}

pub fn rescale_index(values: &[f64], scaler: IndexScaler) -> Result<Vec<f64>, ClimateError> {
    if values.is_empty() {
        return Err(ClimateError::EmptySeries);
    }
    Ok(values.iter().map(|&v| scaler.apply(v)).collect())
}
