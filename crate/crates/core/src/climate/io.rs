//! CSV formats for weather, station metadata and monthly indices.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{ClimateError, DailyWeather, MonthlyIndexRow, StationMeta};
use crate::calendar::YearMonth;

fn io_err(e: impl std::fmt::Display) -> ClimateError {
    ClimateError::Io(e.to_string())
}

#[derive(Debug, Serialize, Deserialize)]
struct WeatherRecord {
    station_id: String,
    date: NaiveDate,
    precip_mm: f64,
    tmax_c: f64,
    tmin_c: f64,
    tavg_c: f64,
    snow: u8,
}

/// Reads daily weather grouped by station, each station sorted by date.
pub fn read_weather<R: Read>(reader: R) -> Result<BTreeMap<String, Vec<DailyWeather>>, ClimateError> {
    let mut out: BTreeMap<String, Vec<DailyWeather>> = BTreeMap::new();
    for (line, rec) in csv::Reader::from_reader(reader).deserialize::<WeatherRecord>().enumerate() {
        let r = rec.map_err(|e| ClimateError::Io(format!("weather row {}: {e}", line + 2)))?;
        if r.snow > 1 {
            return Err(ClimateError::Io(format!("weather row {}: snow must be 0 or 1", line + 2)));
        }
        out.entry(r.station_id).or_default().push(DailyWeather {
            date: r.date,
            precip: r.precip_mm,
            t_max: r.tmax_c,
            t_min: r.tmin_c,
            t_avg: r.tavg_c,
            snow_day: r.snow == 1,
        });
    }
    for days in out.values_mut() {
        days.sort_by_key(|d| d.date);
    }
    Ok(out)
}

pub fn write_weather<W: Write>(writer: W, stations: &BTreeMap<String, Vec<DailyWeather>>) -> Result<(), ClimateError> {
    let mut w = csv::Writer::from_writer(writer);
    for (id, days) in stations {
        for d in days {
            w.serialize(WeatherRecord {
                station_id: id.clone(),
                date: d.date,
                precip_mm: d.precip,
                tmax_c: d.t_max,
                tmin_c: d.t_min,
                tavg_c: d.t_avg,
                snow: d.snow_day as u8,
            })
            .map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

#[derive(Debug, Serialize, Deserialize)]
struct StationRecord {
    station_id: String,
    lat: f64,
    lon: f64,
    drought_region_weight: f64,
    freeze_region_weight: f64,
}

pub fn read_stations<R: Read>(reader: R) -> Result<Vec<StationMeta>, ClimateError> {
    let mut out = Vec::new();
    for rec in csv::Reader::from_reader(reader).deserialize::<StationRecord>() {
        let r = rec.map_err(io_err)?;
        let meta = StationMeta {
            station_id: r.station_id,
            latitude: r.lat,
            longitude: r.lon,
            drought_region_weight: r.drought_region_weight,
            freeze_region_weight: r.freeze_region_weight,
        };
        meta.validate()?;
        out.push(meta);
    }
    Ok(out)
}

pub fn write_stations<W: Write>(writer: W, stations: &[StationMeta]) -> Result<(), ClimateError> {
    let mut w = csv::Writer::from_writer(writer);
    for s in stations {
        w.serialize(StationRecord {
            station_id: s.station_id.clone(),
            lat: s.latitude,
            lon: s.longitude,
            drought_region_weight: s.drought_region_weight,
            freeze_region_weight: s.freeze_region_weight,
        })
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRecord {
    station_id: String,
    year_month: YearMonth,
    di: f64,
    wlr: f64,
    ht: f64,
    cf: f64,
}

pub fn read_indices<R: Read>(reader: R) -> Result<Vec<MonthlyIndexRow>, ClimateError> {
    csv::Reader::from_reader(reader)
        .deserialize::<IndexRecord>()
        .map(|rec| {
            let r = rec.map_err(io_err)?;
            Ok(MonthlyIndexRow { station_id: r.station_id, year_month: r.year_month, di: r.di, wlr: r.wlr, ht: r.ht, cf: r.cf })
        })
        .collect()
}

pub fn write_indices<W: Write>(writer: W, rows: &[MonthlyIndexRow]) -> Result<(), ClimateError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(IndexRecord {
            station_id: r.station_id.clone(),
            year_month: r.year_month,
            di: r.di,
            wlr: r.wlr,
            ht: r.ht,
            cf: r.cf,
        })
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weather_round_trip() {
        let text = "station_id,date,precip_mm,tmax_c,tmin_c,tavg_c,snow\n\
                    A,2020-01-02,1.5,5,-3,1,1\n\
                    A,2020-01-01,0,4,-2,1,0\n";
        let w = read_weather(text.as_bytes()).unwrap();
        assert_eq!(w["A"][0].date, NaiveDate::from_ymd_opt(2020, 1, 1).unwrap());
        assert!(w["A"][1].snow_day);
        let mut buf = Vec::new();
        write_weather(&mut buf, &w).unwrap();
        assert_eq!(read_weather(buf.as_slice()).unwrap(), w);
    }

    #[test]
    fn station_weights_are_validated() {
        let text = "station_id,lat,lon,drought_region_weight,freeze_region_weight\nA,30,110,0.5,1\n";
        assert!(matches!(read_stations(text.as_bytes()), Err(ClimateError::InvalidStation(..))));
    }

    #[test]
    fn index_header() {
        let rows = vec![MonthlyIndexRow {
            station_id: "A".into(),
            year_month: YearMonth::new(2021, 3).unwrap(),
            di: 1.0,
            wlr: 0.0,
            ht: 0.5,
            cf: 2.0,
        }];
        let mut buf = Vec::new();
        write_indices(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("station_id,year_month,di,wlr,ht,cf\nA,2021-03,"));
        assert_eq!(read_indices(buf.as_slice()).unwrap(), rows);
    }
}
