//! Nearest-station matching and 12-month climate panels.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::calendar::YearMonth;
use crate::climate::{MonthlyIndexRow, StationMeta};
use crate::loans::LoanRecord;

pub const PANEL_MONTHS: usize = 12;
pub const FACTORS: usize = 4;
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PanelError {
    #[error("no stations to match against")]
    EmptyStationSet,
    #[error("station {station} lacks months {months:?}")]
    MissingMonth { station: String, months: Vec<YearMonth> },
    #[error("panel csv: {0}")]
    Io(String),
}

/// Great-circle distance in kilometres between two (lat, lon) points in degrees.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Closest station to a point; equal distances go to the smaller id.
pub fn nearest_station<'a>(lat: f64, lon: f64, stations: &'a [StationMeta]) -> Result<&'a StationMeta, PanelError> {
    stations
        .iter()
        .map(|s| (haversine_km(lat, lon, s.latitude, s.longitude), s))
        .min_by(|(da, a), (db, b)| da.total_cmp(db).then_with(|| a.station_id.cmp(&b.station_id)))
        .map(|(_, s)| s)
        .ok_or(PanelError::EmptyStationSet)
}

/// Monthly index values keyed by station and month.
#[derive(Debug, Clone, Default)]
pub struct IndexStore {
    values: HashMap<(String, YearMonth), [f64; FACTORS]>,
}

impl IndexStore {
    pub fn new(rows: &[MonthlyIndexRow]) -> Self {
        let values = rows.iter().map(|r| ((r.station_id.clone(), r.year_month), r.values())).collect();
        Self { values }
    }

    pub fn get(&self, station: &str, ym: YearMonth) -> Option<&[f64; FACTORS]> {
        self.values.get(&(station.to_string(), ym))
    }
}

/// Four factors over the twelve months before origination, oldest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClimatePanel {
    pub loan_id: String,
    pub values: [[f64; FACTORS]; PANEL_MONTHS],
}

/// Calendar months strictly before the start month, oldest first.
pub fn panel_months(start: YearMonth) -> [YearMonth; PANEL_MONTHS] {
    std::array::from_fn(|i| start.offset(i as i64 - PANEL_MONTHS as i64))
}

pub fn build_panel(loan: &LoanRecord, station_id: &str, store: &IndexStore) -> Result<ClimatePanel, PanelError> {
    let months = panel_months(YearMonth::of(loan.start_date));
    let missing: Vec<YearMonth> = months.iter().copied().filter(|m| store.get(station_id, *m).is_none()).collect();
    if !missing.is_empty() {
        return Err(PanelError::MissingMonth { station: station_id.to_string(), months: missing });
    }
    let values = std::array::from_fn(|i| *store.get(station_id, months[i]).expect("checked"));
    Ok(ClimatePanel { loan_id: loan.loan_id.clone(), values })
}

/// Panels for every loan whose station covers all twelve months. Loans
/// with gaps are returned separately with the reason.
pub fn build_panels(
    loans: &[LoanRecord],
    stations: &[StationMeta],
    rows: &[MonthlyIndexRow],
) -> Result<(Vec<ClimatePanel>, Vec<(String, PanelError)>), PanelError> {
    let store = IndexStore::new(rows);
    let mut panels = Vec::new();
    let mut dropped = Vec::new();
    for loan in loans {
        let station = nearest_station(loan.latitude, loan.longitude, stations)?;
        match build_panel(loan, &station.station_id, &store) {
            Ok(p) => panels.push(p),
            Err(e @ PanelError::MissingMonth { .. }) => dropped.push((loan.loan_id.clone(), e)),
            Err(e) => return Err(e),
        }
    }
    Ok((panels, dropped))
}

#[derive(Debug, Serialize, Deserialize)]
struct PanelRecord {
    loan_id: String,
    month_offset: i32,
    di: f64,
    wlr: f64,
    ht: f64,
    cf: f64,
}

pub fn write_panels<W: Write>(writer: W, panels: &[ClimatePanel]) -> Result<(), PanelError> {
    let err = |e: csv::Error| PanelError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    for p in panels {
        for (i, v) in p.values.iter().enumerate() {
            let rec = PanelRecord {
                loan_id: p.loan_id.clone(),
                month_offset: i as i32 - PANEL_MONTHS as i32,
                di: v[0],
                wlr: v[1],
                ht: v[2],
                cf: v[3],
            };
            w.serialize(rec).map_err(err)?;
        }
    }
    w.flush().map_err(|e| PanelError::Io(e.to_string()))
}

/// Reads panels written by [`write_panels`]; every loan needs all twelve offsets.
pub fn read_panels<R: Read>(reader: R) -> Result<Vec<ClimatePanel>, PanelError> {
    let mut order: Vec<String> = Vec::new();
    let mut partial: HashMap<String, [Option<[f64; FACTORS]>; PANEL_MONTHS]> = HashMap::new();
    for rec in csv::Reader::from_reader(reader).deserialize::<PanelRecord>() {
        let r = rec.map_err(|e| PanelError::Io(e.to_string()))?;
        let slot = r.month_offset + PANEL_MONTHS as i32;
        if !(0..PANEL_MONTHS as i32).contains(&slot) {
            return Err(PanelError::Io(format!("{}: month_offset {} outside -12..-1", r.loan_id, r.month_offset)));
        }
        let entry = partial.entry(r.loan_id.clone()).or_insert_with(|| {
            order.push(r.loan_id.clone());
            [None; PANEL_MONTHS]
        });
        entry[slot as usize] = Some([r.di, r.wlr, r.ht, r.cf]);
    }
    order
        .into_iter()
        .map(|id| {
            let slots = partial.remove(&id).expect("inserted");
            let mut values = [[0.0; FACTORS]; PANEL_MONTHS];
            for (i, s) in slots.iter().enumerate() {
                values[i] = s.ok_or_else(|| PanelError::Io(format!("{id}: missing month_offset {}", i as i32 - 12)))?;
            }
            Ok(ClimatePanel { loan_id: id, values })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use std::collections::BTreeMap;

    fn station(id: &str, lat: f64, lon: f64) -> StationMeta {
        StationMeta {
            station_id: id.into(),
            latitude: lat,
            longitude: lon,
            drought_region_weight: 1.0,
            freeze_region_weight: 1.0,
        }
    }

    fn loan(start: NaiveDate) -> LoanRecord {
        LoanRecord {
            loan_id: "L".into(),
            latitude: 30.0,
            longitude: 100.0,
            start_date: start,
            term_months: 3,
            continuous: BTreeMap::new(),
            categorical: BTreeMap::new(),
            text: vec![],
            label: 0,
        }
    }

    #[test]
    fn nearest_examples() {
        let s = [station("far", 35.0, 100.0), station("near", 30.0, 101.0)];
        assert_eq!(nearest_station(30.0, 100.0, &s).unwrap().station_id, "near");
        let d1 = haversine_km(30.0, 100.0, 30.0, 101.0);
        let d2 = haversine_km(30.0, 100.0, 35.0, 100.0);
        assert!((d1 - 96.3).abs() < 0.5 && (d2 - 556.0).abs() < 1.0, "{d1} {d2}");
        assert_eq!(haversine_km(30.0, 100.0, 30.0, 100.0), 0.0);
        let tie = [station("b", 30.0, 101.0), station("a", 30.0, 99.0)];
        assert_eq!(nearest_station(30.0, 100.0, &tie).unwrap().station_id, "a");
        assert_eq!(nearest_station(0.0, 0.0, &[]), Err(PanelError::EmptyStationSet));
    }

    fn rows_from(first: YearMonth, n: i64) -> Vec<MonthlyIndexRow> {
        (0..n)
            .map(|i| MonthlyIndexRow {
                station_id: "S".into(),
                year_month: first.offset(i),
                di: i as f64,
                wlr: 0.1,
                ht: 0.2,
                cf: 0.3,
            })
            .collect()
    }

    #[test]
    fn panel_uses_months_before_start() {
        let start = NaiveDate::from_ymd_opt(2020, 6, 15).unwrap();
        let months = panel_months(YearMonth::of(start));
        assert_eq!(months[0].to_string(), "2019-06");
        assert_eq!(months[11].to_string(), "2020-05");
        let store = IndexStore::new(&rows_from(YearMonth::new(2019, 1).unwrap(), 24));
        let p = build_panel(&loan(start), "S", &store).unwrap();
        assert_eq!(p.values[0][0], 5.0);
        assert_eq!(p.values[11][0], 16.0);
    }

    #[test]
    fn gap_reports_missing_months() {
        let start = NaiveDate::from_ymd_opt(2020, 6, 1).unwrap();
        let store = IndexStore::new(&rows_from(YearMonth::new(2019, 8).unwrap(), 24));
        match build_panel(&loan(start), "S", &store) {
            Err(PanelError::MissingMonth { months, .. }) => {
                assert_eq!(months.iter().map(|m| m.to_string()).collect::<Vec<_>>(), ["2019-06", "2019-07"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn panel_csv_round_trip_is_exact() {
        let mut values = [[0.0; FACTORS]; PANEL_MONTHS];
        for (i, row) in values.iter_mut().enumerate() {
            *row = [1.0 / (i as f64 + 3.0), 0.1 * i as f64, 2.0f64.sqrt(), 1e-17];
        }
        let panels = vec![ClimatePanel { loan_id: "L9".into(), values }];
        let mut buf = Vec::new();
        write_panels(&mut buf, &panels).unwrap();
        assert_eq!(read_panels(buf.as_slice()).unwrap(), panels);
    }
}
