//! Per-station pipeline from daily weather to monthly indices.
//!
//! Daily SPI is computed on trailing precipitation totals. One gamma law is
//! fitted per calendar month, pooling the trailing totals of every day in
//! that month over the climatology years.

use std::collections::BTreeMap;
use std::ops::Range;

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use super::indices::{IndexScaler, monthly_cf, monthly_drought, monthly_ht, monthly_wlr, pentad_of_day, PentadStats, PENTADS};
use super::spi::{PrecipDistribution, MIN_HISTORY};
use super::{ClimateError, DailyWeather, MonthlyIndexRow, StationMeta};
use crate::calendar::YearMonth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexConfig {
    pub spi_window_days: usize,
    pub climatology_start: i32,
    pub climatology_end: i32,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self { spi_window_days: 30, climatology_start: 2001, climatology_end: 2020 }
    }
}

impl IndexConfig {
    fn in_climatology(&self, year: i32) -> bool {
        (self.climatology_start..=self.climatology_end).contains(&year)
    }
}

/// Mean and spread of pentad-average temperature per (month, pentad).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PentadClimatology {
    pub stats: [[PentadStats; PENTADS]; 12],
}

impl PentadClimatology {
    /// Builds the climatology from complete months whose year lies in
    /// `start..=end`. Spread is the sample standard deviation across years.
    pub fn from_weather(days: &[DailyWeather], start: i32, end: i32) -> Result<Self, ClimateError> {
        let mut samples: Vec<Vec<f64>> = vec![Vec::new(); 12 * PENTADS];
        for (ym, range) in complete_months(days) {
            if !(start..=end).contains(&ym.year()) {
                continue;
            }
            let (means, _) = pentad_summary(&days[range]);
            for (p, m) in means.iter().enumerate() {
                samples[(ym.month() as usize - 1) * PENTADS + p].push(*m);
            }
        }
        let empty = PentadStats { mean: 0.0, std: 0.0 };
        let mut stats = [[empty; PENTADS]; 12];
        for (i, s) in samples.iter().enumerate() {
            if s.is_empty() {
                return Err(ClimateError::HistoryTooShort { n: 0, min: 1 });
            }
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let std = if s.len() > 1 {
                (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            stats[i / PENTADS][i % PENTADS] = PentadStats { mean, std };
        }
        Ok(Self { stats })
    }

    pub fn month(&self, month: u32) -> &[PentadStats; PENTADS] {
        &self.stats[month as usize - 1]
    }
}

/// Pentad-average temperature and snow-day count of one month's days.
fn pentad_summary(days: &[DailyWeather]) -> ([f64; PENTADS], [u32; PENTADS]) {
    let mut sums = [0.0; PENTADS];
    let mut counts = [0u32; PENTADS];
    let mut snow = [0u32; PENTADS];
    for d in days {
        let p = pentad_of_day(d.date.day());
        sums[p] += d.t_avg;
        counts[p] += 1;
        snow[p] += d.snow_day as u32;
    }
    let mut means = [0.0; PENTADS];
    for p in 0..PENTADS {
        means[p] = sums[p] / counts[p].max(1) as f64;
    }
    (means, snow)
}

/// Date-sorted days grouped into calendar months that have every day present.
fn complete_months(days: &[DailyWeather]) -> Vec<(YearMonth, Range<usize>)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < days.len() {
        let ym = YearMonth::of(days[start].date);
        let mut end = start;
        while end < days.len() && YearMonth::of(days[end].date) == ym {
            end += 1;
        }
        if end - start == ym.days() as usize {
            out.push((ym, start..end));
        }
        start = end;
    }
    out
}

fn sorted_checked(station: &str, weather: &[DailyWeather]) -> Result<Vec<DailyWeather>, ClimateError> {
    let mut days = weather.to_vec();
    days.sort_by_key(|d| d.date);
    for d in &days {
        d.validate(station)?;
    }
    if let Some(w) = days.windows(2).find(|w| w[0].date == w[1].date) {
        return Err(ClimateError::InvalidWeather {
            station: station.to_string(),
            date: w[0].date,
            reason: "duplicate date".into(),
        });
    }
    Ok(days)
}

/// Trailing `window`-day precipitation totals; `None` until a full run of
/// consecutive dates is available.
fn trailing_totals(days: &[DailyWeather], window: usize) -> Vec<Option<f64>> {
    let mut prefix = Vec::with_capacity(days.len() + 1);
    prefix.push(0.0);
    for d in days {
        prefix.push(prefix.last().unwrap() + d.precip);
    }
    (0..days.len())
        .map(|i| {
            if window == 0 || i + 1 < window {
                return None;
            }
            let first = i + 1 - window;
            let span = (days[i].date - days[first].date).num_days();
            (span == window as i64 - 1).then(|| (prefix[i + 1] - prefix[first]).max(0.0))
        })
        .collect()
}

/// Daily SPI for every day with a complete trailing window.
pub fn daily_spi(days: &[DailyWeather], cfg: &IndexConfig) -> Result<Vec<Option<f64>>, ClimateError> {
    let totals = trailing_totals(days, cfg.spi_window_days);
    let mut fits = BTreeMap::new();
    for month in 1..=12u32 {
        let pick = |clim_only: bool| -> Vec<f64> {
            days.iter()
                .zip(&totals)
                .filter(|(d, t)| t.is_some() && d.date.month() == month && (!clim_only || cfg.in_climatology(d.date.year())))
                .map(|(_, t)| t.unwrap())
                .collect()
        };
        let mut history = pick(true);
        if history.len() < MIN_HISTORY {
            history = pick(false);
        }
        if history.is_empty() {
            continue;
        }
        fits.insert(month, PrecipDistribution::from_history(&history)?);
    }
    Ok(days
        .iter()
        .zip(&totals)
        .map(|(d, t)| t.and_then(|x| fits.get(&d.date.month()).map(|f| f.spi(x))))
        .collect())
}

/// Monthly indices for every complete month with SPI on every day.
pub fn compute_station_indices(
    meta: &StationMeta,
    weather: &[DailyWeather],
    cfg: &IndexConfig,
) -> Result<Vec<MonthlyIndexRow>, ClimateError> {
    meta.validate()?;
    let days = sorted_checked(&meta.station_id, weather)?;
    let climatology = PentadClimatology::from_weather(&days, cfg.climatology_start, cfg.climatology_end)?;
    let spi = daily_spi(&days, cfg)?;
    let mut rows = Vec::new();
    for (ym, range) in complete_months(&days) {
        let month_days = &days[range.clone()];
        let month_spi: Option<Vec<f64>> = spi[range].iter().copied().collect();
        let Some(month_spi) = month_spi else { continue };
        let col = |f: fn(&DailyWeather) -> f64| month_days.iter().map(f).collect::<Vec<_>>();
        let m = ym.month();
        let di = monthly_drought(&month_spi, &col(|d| d.t_avg), meta.drought_region_weight, m)?;
        let wlr = monthly_wlr(&col(|d| d.precip), m)?;
        let ht = monthly_ht(&col(|d| d.t_max), &col(|d| d.t_min), m)?;
        let (means, snow) = pentad_summary(month_days);
        let cf = monthly_cf(&means, climatology.month(m), &snow, meta.freeze_region_weight, m)?;
        rows.push(MonthlyIndexRow { station_id: meta.station_id.clone(), year_month: ym, di, wlr, ht, cf });
    }
    Ok(rows)
}

/// Indices for every station that has weather, in station order.
pub fn compute_all_indices(
    stations: &[StationMeta],
    weather: &BTreeMap<String, Vec<DailyWeather>>,
    cfg: &IndexConfig,
) -> Result<Vec<MonthlyIndexRow>, ClimateError> {
    let mut rows = Vec::new();
    for meta in stations {
        if let Some(days) = weather.get(&meta.station_id) {
            rows.extend(compute_station_indices(meta, days, cfg)?);
        }
    }
    Ok(rows)
}

/// Min-max rescales each factor onto [0, 10] over all `rows`; returns the
/// fitted scalers in DI, WLR, HT, CF order.
pub fn rescale_rows(rows: &mut [MonthlyIndexRow]) -> Result<[IndexScaler; 4], ClimateError> {
    let scalers: Vec<IndexScaler> = (0..4)
        .map(|f| IndexScaler::fit(&rows.iter().map(|r| r.values()[f]).collect::<Vec<_>>()).ok_or(ClimateError::EmptySeries))
        .collect::<Result<_, _>>()?;
    for r in rows.iter_mut() {
        r.di = scalers[0].apply(r.di);
        r.wlr = scalers[1].apply(r.wlr);
        r.ht = scalers[2].apply(r.ht);
        r.cf = scalers[3].apply(r.cf);
    }
    Ok([scalers[0], scalers[1], scalers[2], scalers[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn day(date: NaiveDate, precip: f64, t: f64) -> DailyWeather {
        DailyWeather { date, precip, t_max: t + 5.0, t_min: t - 5.0, t_avg: t, snow_day: false }
    }

    fn series(years: std::ops::RangeInclusive<i32>, f: impl Fn(NaiveDate, usize) -> DailyWeather) -> Vec<DailyWeather> {
        let start = NaiveDate::from_ymd_opt(*years.start(), 1, 1).unwrap();
        let end = NaiveDate::from_ymd_opt(*years.end(), 12, 31).unwrap();
        start.iter_days().take_while(|d| *d <= end).enumerate().map(|(i, d)| f(d, i)).collect()
    }

    fn meta() -> StationMeta {
        StationMeta {
            station_id: "S1".into(),
            latitude: 30.0,
            longitude: 110.0,
            drought_region_weight: 1.0,
            freeze_region_weight: 1.0,
        }
    }

    #[test]
    fn trailing_totals_need_consecutive_days() {
        let d0 = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let mut days: Vec<_> = (0..5).map(|i| day(d0 + chrono::Days::new(i), 1.0 + i as f64, 10.0)).collect();
        days.remove(2);
        let t = trailing_totals(&days, 2);
        assert_eq!(t, [None, Some(3.0), None, Some(9.0)]);
    }

    #[test]
    fn station_pipeline_covers_complete_months() {
        let days = series(2001..=2003, |d, i| {
            let wet = (i * 7919) % 13 == 0;
            day(d, if wet { 30.0 + (i % 5) as f64 * 20.0 } else { (i % 3) as f64 }, 15.0 + (i % 11) as f64)
        });
        let cfg = IndexConfig { climatology_start: 2001, climatology_end: 2003, ..Default::default() };
        let rows = compute_station_indices(&meta(), &days, &cfg).unwrap();
        // January 2001 lacks a full trailing window on its first days
        assert_eq!(rows.len(), 35);
        assert_eq!(rows[0].year_month.to_string(), "2001-02");
        for r in &rows {
            assert!(r.values().iter().all(|v| v.is_finite() && *v >= 0.0), "{r:?}");
        }
    }

    #[test]
    fn rejects_inconsistent_temperatures() {
        let mut days = series(2001..=2001, |d, _| day(d, 1.0, 10.0));
        days[40].t_avg = 99.0;
        assert!(matches!(
            compute_station_indices(&meta(), &days, &IndexConfig::default()),
            Err(ClimateError::InvalidWeather { .. })
        ));
    }

    #[test]
    fn climatology_is_per_pentad() {
        let days = series(2001..=2002, |d, _| {
            let t = if d.year() == 2001 { 0.0 } else { 2.0 } + d.day() as f64;
            day(d, 0.0, t)
        });
        let c = PentadClimatology::from_weather(&days, 2001, 2002).unwrap();
        let jan = c.month(1);
        assert!((jan[0].mean - 4.0).abs() < 1e-12);
        assert!((jan[0].std - 2f64.sqrt()).abs() < 1e-12);
        assert!((jan[5].mean - 29.5).abs() < 1e-12);
    }
}
