//! Climate risk indices from daily station weather.
//!
//! [`spi`] holds the gamma fit and the SPI transform, [`indices`] the four
//! monthly indices, and [`station`] wires them into a per-station pipeline
//! that emits one [`MonthlyIndexRow`] per complete month.

pub mod indices;
pub mod io;
pub mod spi;
pub mod station;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::YearMonth;

pub use indices::{
    daily_drought, monthly_cf, monthly_drought, monthly_ht, monthly_wlr, pentad_of_day, rescale_index, IndexScaler,
    PentadStats, PENTADS,
};
pub use spi::{compute_spi, fit_gamma, gamma_cdf, spi_from_probability, GammaFit, PrecipDistribution};
pub use station::{compute_all_indices, compute_station_indices, rescale_rows, IndexConfig, PentadClimatology};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClimateError {
    #[error("history has {n} values, need at least {min}")]
    HistoryTooShort { n: usize, min: usize },
    #[error("positive values are all equal to {value}")]
    DegenerateSample { value: f64, zero_fraction: f64 },
    #[error("invalid precipitation {0}")]
    NegativePrecipitation(f64),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("month {0} outside 1..=12")]
    InvalidMonth(u32),
    #[error("empty series")]
    EmptySeries,
    #[error("weather {station} {date}: {reason}")]
    InvalidWeather { station: String, date: NaiveDate, reason: String },
    #[error("station {0}: {1}")]
    InvalidStation(String, String),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyWeather {
    pub date: NaiveDate,
    pub precip: f64,
    pub t_max: f64,
    pub t_min: f64,
    pub t_avg: f64,
    pub snow_day: bool,
}

impl DailyWeather {
    pub fn validate(&self, station: &str) -> Result<(), ClimateError> {
        let fail = |reason: &str| {
            Err(ClimateError::InvalidWeather { station: station.to_string(), date: self.date, reason: reason.into() })
        };
        if !(self.precip.is_finite() && self.precip >= 0.0) {
            return fail("precipitation must be finite and >= 0");
        }
        if !(self.t_min.is_finite() && self.t_avg.is_finite() && self.t_max.is_finite()) {
            return fail("temperatures must be finite");
        }
        if !(self.t_min <= self.t_avg && self.t_avg <= self.t_max) {
            return fail("expected t_min <= t_avg <= t_max");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationMeta {
    pub station_id: String,
    pub latitude: f64,
    pub longitude: f64,
    pub drought_region_weight: f64,
    pub freeze_region_weight: f64,
}

pub const DROUGHT_WEIGHTS: [f64; 3] = [0.0, 0.6, 1.0];
pub const FREEZE_WEIGHTS: [f64; 2] = [0.5, 1.0];

impl StationMeta {
    pub fn validate(&self) -> Result<(), ClimateError> {
        let fail = |m: &str| Err(ClimateError::InvalidStation(self.station_id.clone(), m.into()));
        if !(-90.0..=90.0).contains(&self.latitude) {
            return fail("latitude outside [-90, 90]");
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return fail("longitude outside [-180, 180]");
        }
        if !DROUGHT_WEIGHTS.contains(&self.drought_region_weight) {
            return fail("drought weight must be 0, 0.6 or 1");
        }
        if !FREEZE_WEIGHTS.contains(&self.freeze_region_weight) {
            return fail("freeze weight must be 0.5 or 1");
        }
        Ok(())
    }
}

/// The four oriented monthly severities of one station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyIndexRow {
    pub station_id: String,
    pub year_month: YearMonth,
    pub di: f64,
    pub wlr: f64,
    pub ht: f64,
    pub cf: f64,
}

impl MonthlyIndexRow {
    pub fn values(&self) -> [f64; 4] {
        [self.di, self.wlr, self.ht, self.cf]
    }
}

pub const FACTOR_NAMES: [&str; 4] = ["di", "wlr", "ht", "cf"];
