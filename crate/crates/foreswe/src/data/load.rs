//! CSV ingestion and serialization.
//!
//! A data directory holds two files:
//!
//! * `stations.csv` — header exactly
//!   `station_id,latitude,longitude,elevation_ft,southness,land_cover,prompt_key`
//! * `daily.csv` — header exactly
//!   `station_id,water_year,day_index,swe_mm,tmax_c,tmin_c,precip_accum_mm,srad_wm2,wind_ms,rhmax_pct,rhmin_pct,spec_humidity,tb19v_k,tb37v_k`
//!
//! `day_index` is 0-based from December 1. The derived `tb_diff_k` column is
//! never stored on disk; it is recomputed after ingestion. Value fields may
//! be empty (missing). Ingestion rules:
//!
//! * a station is dropped entirely if any water year has more than 10% of
//!   its SWE values missing (days with no row count as missing);
//! * surviving gaps are forward-filled within each station-year, and days
//!   before the first observation are zero-filled;
//! * `tmax_c >= tmin_c` is required of raw rows where both are present; if
//!   filling creates a violation, `tmin_c` is lowered to `tmax_c`.
//!
//! Error row numbers are 1-based file line numbers (the header is line 1).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use super::{
    DailySeries, DataError, Dataset, StationMeta, ATTR_SWE, NUM_ATTRIBUTES, SEASON_DAYS,
};
use crate::Mat;

pub const STATIONS_FILE: &str = "stations.csv";
pub const DAILY_FILE: &str = "daily.csv";

const STATION_HEADER: [&str; 7] = [
    "station_id",
    "latitude",
    "longitude",
    "elevation_ft",
    "southness",
    "land_cover",
    "prompt_key",
];

/// Columns stored on disk: the first 11 attributes (tb_diff is derived).
const STORED_ATTRIBUTES: usize = NUM_ATTRIBUTES - 1;

const DAILY_HEADER: [&str; 3 + STORED_ATTRIBUTES] = [
    "station_id",
    "water_year",
    "day_index",
    "swe_mm",
    "tmax_c",
    "tmin_c",
    "precip_accum_mm",
    "srad_wm2",
    "wind_ms",
    "rhmax_pct",
    "rhmin_pct",
    "spec_humidity",
    "tb19v_k",
    "tb37v_k",
];

/// Fraction of a year's SWE values that may be missing before the station is
/// dropped.
const MAX_MISSING_SWE_FRACTION: f64 = 0.10;

fn schema(detail: impl Into<String>) -> DataError {
    DataError::SchemaError { detail: detail.into() }
}

fn parse_err(row: usize, detail: impl Into<String>) -> DataError {
    DataError::ParseError { row, detail: detail.into() }
}

fn check_header(got: &csv::StringRecord, want: &[&str], file: &str) -> Result<(), DataError> {
    let got_cols: Vec<&str> = got.iter().collect();
    if got_cols != want {
        return Err(schema(format!(
            "{file} header mismatch: expected {:?}, got {:?}",
            want.join(","),
            got_cols.join(",")
        )));
    }
    Ok(())
}

fn row_of(record: &csv::StringRecord) -> usize {
    record.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn field<'a>(record: &'a csv::StringRecord, idx: usize, row: usize) -> Result<&'a str, DataError> {
    record.get(idx).ok_or_else(|| parse_err(row, format!("missing column {idx}")))
}

fn parse_f64(s: &str, row: usize, name: &str) -> Result<f64, DataError> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(row, format!("cannot parse {name} from {s:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(row, format!("{name} is not finite: {s:?}")));
    }
    Ok(v)
}

fn parse_opt_f64(s: &str, row: usize, name: &str) -> Result<Option<f64>, DataError> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(s, row, name).map(Some)
    }
}

fn read_stations(path: &Path) -> Result<Vec<StationMeta>, DataError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| DataError::Io {
        detail: format!("{}: {e}", path.display()),
    })?;
    let headers = rdr.headers().map_err(|e| schema(e.to_string()))?.clone();
    check_header(&headers, &STATION_HEADER, STATIONS_FILE)?;

    let mut stations: Vec<StationMeta> = Vec::new();
    for result in rdr.records() {
        let record = result.map_err(|e| schema(e.to_string()))?;
        let row = row_of(&record);
        if record.len() != STATION_HEADER.len() {
            return Err(parse_err(row, format!("expected {} columns", STATION_HEADER.len())));
        }
        let station_id = field(&record, 0, row)?.trim().to_string();
        if station_id.is_empty() {
            return Err(parse_err(row, "empty station_id"));
        }
        if stations.iter().any(|s| s.station_id == station_id) {
            return Err(parse_err(row, format!("duplicate station_id {station_id}")));
        }
        let lat = parse_f64(field(&record, 1, row)?, row, "latitude")?;
        let lon = parse_f64(field(&record, 2, row)?, row, "longitude")?;
        let elevation_ft = parse_f64(field(&record, 3, row)?, row, "elevation_ft")?;
        let southness = parse_f64(field(&record, 4, row)?, row, "southness")?;
        let land_cover: u8 = field(&record, 5, row)?
            .trim()
            .parse()
            .map_err(|_| parse_err(row, "cannot parse land_cover"))?;
        let prompt_key = field(&record, 6, row)?.trim().to_string();
        if prompt_key.is_empty() {
            return Err(parse_err(row, "empty prompt_key"));
        }
        let meta =
            StationMeta::new(station_id, lat, lon, elevation_ft, southness, land_cover, prompt_key)
                .map_err(|e| parse_err(row, e.to_string()))?;
        stations.push(meta);
    }
    if stations.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(stations)
}

/// Raw per-day observations: `Some` = observed, `None` = missing.
type RawYear = Vec<[Option<f64>; STORED_ATTRIBUTES]>;

/// Load a dataset from `dir/stations.csv` and `dir/daily.csv`.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let stations = read_stations(&dir.join(STATIONS_FILE))?;
    let daily_path = dir.join(DAILY_FILE);
    let mut rdr = csv::Reader::from_path(&daily_path).map_err(|e| DataError::Io {
        detail: format!("{}: {e}", daily_path.display()),
    })?;
    let headers = rdr.headers().map_err(|e| schema(e.to_string()))?.clone();
    check_header(&headers, &DAILY_HEADER, DAILY_FILE)?;

    // raw[station_index][water_year] -> per-day optional observations.
    let mut raw: Vec<BTreeMap<i32, RawYear>> = vec![BTreeMap::new(); stations.len()];
    for result in rdr.records() {
        let record = result.map_err(|e| schema(e.to_string()))?;
        let row = row_of(&record);
        if record.len() != DAILY_HEADER.len() {
            return Err(parse_err(row, format!("expected {} columns", DAILY_HEADER.len())));
        }
        let station_id = field(&record, 0, row)?.trim();
        let station_index = stations
            .iter()
            .position(|s| s.station_id == station_id)
            .ok_or_else(|| schema(format!("daily row {row} references unknown station {station_id}")))?;
        let water_year: i32 = field(&record, 1, row)?
            .trim()
            .parse()
            .map_err(|_| parse_err(row, "cannot parse water_year"))?;
        let day: usize = field(&record, 2, row)?
            .trim()
            .parse()
            .map_err(|_| parse_err(row, "cannot parse day_index"))?;
        if day >= SEASON_DAYS {
            return Err(parse_err(row, format!("day_index {day} outside 0..{SEASON_DAYS}")));
        }

        let mut values = [None; STORED_ATTRIBUTES];
        for (a, value) in values.iter_mut().enumerate() {
            *value = parse_opt_f64(field(&record, 3 + a, row)?, row, DAILY_HEADER[3 + a])?;
        }
        if let Some(swe) = values[ATTR_SWE] {
            if swe < 0.0 {
                return Err(parse_err(row, format!("negative swe_mm {swe}")));
            }
        }
        if let (Some(tmax), Some(tmin)) = (values[1], values[2]) {
            if tmax < tmin {
                return Err(parse_err(row, format!("tmax_c {tmax} below tmin_c {tmin}")));
            }
        }

        let year_grid = raw[station_index]
            .entry(water_year)
            .or_insert_with(|| vec![[None; STORED_ATTRIBUTES]; SEASON_DAYS]);
        if year_grid[day].iter().any(Option::is_some) {
            return Err(parse_err(
                row,
                format!("duplicate day {day} for station {station_id}, water year {water_year}"),
            ));
        }
        year_grid[day] = values;
    }

    // The year set is the union over all stations.
    let mut years: Vec<i32> = raw.iter().flat_map(|m| m.keys().copied()).collect();
    years.sort_unstable();
    years.dedup();
    if years.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    // Coverage filter: a station survives only if every year is at most
    // MAX_MISSING_SWE_FRACTION missing in SWE (absent rows included).
    let allowed_missing = (MAX_MISSING_SWE_FRACTION * SEASON_DAYS as f64).floor() as usize;
    let mut kept_stations = Vec::new();
    let mut kept_raw = Vec::new();
    for (s, meta) in stations.into_iter().enumerate() {
        let keeps = years.iter().all(|y| {
            let missing = match raw[s].get(y) {
                None => SEASON_DAYS,
                Some(grid) => grid.iter().filter(|d| d[ATTR_SWE].is_none()).count(),
            };
            missing <= allowed_missing
        });
        if keeps {
            kept_stations.push(meta);
            kept_raw.push(std::mem::take(&mut raw[s]));
        }
    }
    if kept_stations.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    // Fill and derive.
    let mut series: Vec<Vec<DailySeries>> = Vec::with_capacity(kept_stations.len());
    for (s, meta) in kept_stations.iter().enumerate() {
        let mut station_series = Vec::with_capacity(years.len());
        for &year in &years {
            let grid = kept_raw[s].get(&year).expect("coverage filter guarantees presence");
            let mut values = Mat::zeros(NUM_ATTRIBUTES, SEASON_DAYS);
            for a in 0..STORED_ATTRIBUTES {
                let mut last: Option<f64> = None;
                for d in 0..SEASON_DAYS {
                    if let Some(v) = grid[d][a] {
                        last = Some(v);
                    }
                    values[(a, d)] = last.unwrap_or(0.0);
                }
            }
            for d in 0..SEASON_DAYS {
                if values[(2, d)] > values[(1, d)] {
                    values[(2, d)] = values[(1, d)];
                }
                values[(NUM_ATTRIBUTES - 1, d)] = values[(9, d)] - values[(10, d)];
            }
            station_series.push(DailySeries {
                station_id: meta.station_id.clone(),
                water_year: year,
                values,
            });
        }
        series.push(station_series);
    }
    Dataset::new(kept_stations, years, series)
}

/// Write `stations.csv` and `daily.csv` into `dir` (created if absent).
///
/// Floats are written with `Display`, whose shortest round-trip form makes
/// `load_dataset(write_dataset(ds)) == ds` bitwise.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;

    let mut sw = BufWriter::new(File::create(dir.join(STATIONS_FILE))?);
    writeln!(sw, "{}", STATION_HEADER.join(","))?;
    for s in dataset.stations() {
        writeln!(
            sw,
            "{},{},{},{},{},{},{}",
            s.station_id,
            s.geo.lat_deg(),
            s.geo.lon_deg(),
            s.elevation_ft,
            s.southness,
            s.land_cover,
            s.prompt_key
        )?;
    }
    sw.flush()?;

    let mut dw = BufWriter::new(File::create(dir.join(DAILY_FILE))?);
    writeln!(dw, "{}", DAILY_HEADER.join(","))?;
    for (s, meta) in dataset.stations().iter().enumerate() {
        for (y, &year) in dataset.years().iter().enumerate() {
            let series = dataset.series(s, y);
            for d in 0..SEASON_DAYS {
                write!(dw, "{},{},{}", meta.station_id, year, d)?;
                for a in 0..STORED_ATTRIBUTES {
                    write!(dw, ",{}", series.values[(a, d)])?;
                }
                writeln!(dw)?;
            }
        }
    }
    dw.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::synthetic::{generate_synthetic, SyntheticConfig};
    use super::*;

    fn write_files(dir: &Path, stations: &str, daily: &str) {
        std::fs::write(dir.join(STATIONS_FILE), stations).unwrap();
        std::fs::write(dir.join(DAILY_FILE), daily).unwrap();
    }

    fn station_line() -> String {
        format!("{}\nS001,45.0,-114.0,5000,0.1,3,ridge\n", STATION_HEADER.join(","))
    }

    /// Daily file with a full year for S001; `edit` may patch individual
    /// (day, column) cells, with `None` meaning blank.
    fn full_year_daily(edit: &dyn Fn(usize, usize) -> Option<Option<String>>) -> String {
        let mut out = format!("{}\n", DAILY_HEADER.join(","));
        for d in 0..SEASON_DAYS {
            let mut cells: Vec<String> = vec!["S001".into(), "1991".to_string(), d.to_string()];
            let defaults = [
                format!("{}", d as f64), // swe grows linearly
                "1.0".to_string(),
                "0.0".to_string(),
                format!("{}", 2.0 * d as f64),
                "100".to_string(),
                "3".to_string(),
                "90".to_string(),
                "40".to_string(),
                "0.004".to_string(),
                "250".to_string(),
                "247".to_string(),
            ];
            for (c, v) in defaults.into_iter().enumerate() {
                match edit(d, c) {
                    Some(Some(replacement)) => cells.push(replacement),
                    Some(None) => cells.push(String::new()),
                    None => cells.push(v),
                }
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let ds = generate_synthetic(&SyntheticConfig {
            n_stations: 3,
            n_years: 2,
            start_year: 1991,
            seed: 42,
        });
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.stations(), back.stations());
        assert_eq!(ds.years(), back.years());
        for s in 0..ds.stations().len() {
            for y in 0..ds.years().len() {
                assert_eq!(ds.series(s, y), back.series(s, y));
            }
        }
    }

    #[test]
    fn header_mismatch_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        write_files(
            dir.path(),
            "station_id,lat,lon,elevation_ft,southness,land_cover,prompt_key\nS001,45,-114,5000,0,3,k\n",
            &full_year_daily(&|_, _| None),
        );
        assert!(matches!(load_dataset(dir.path()), Err(DataError::SchemaError { .. })));
    }

    #[test]
    fn unknown_station_in_daily_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let daily = full_year_daily(&|_, _| None).replace("S001,1991,5,", "S999,1991,5,");
        write_files(dir.path(), &station_line(), &daily);
        let err = load_dataset(dir.path()).unwrap_err();
        match err {
            DataError::SchemaError { detail } => assert!(detail.contains("S999"), "{detail}"),
            other => panic!("expected SchemaError, got {other:?}"),
        }
    }

    #[test]
    fn unparseable_value_reports_its_row() {
        let dir = tempfile::tempdir().unwrap();
        // Day 4 tmax becomes garbage; header is line 1, so day d is line d+2.
        let daily = full_year_daily(&|d, c| {
            (d == 4 && c == 1).then(|| Some("not-a-number".to_string()))
        });
        write_files(dir.path(), &station_line(), &daily);
        match load_dataset(dir.path()).unwrap_err() {
            DataError::ParseError { row, .. } => assert_eq!(row, 6),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_day_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut daily = full_year_daily(&|_, _| None);
        daily.push_str("S001,1991,10,5,1,0,20,100,3,90,40,0.004,250,247\n");
        write_files(dir.path(), &station_line(), &daily);
        match load_dataset(dir.path()).unwrap_err() {
            DataError::ParseError { detail, .. } => assert!(detail.contains("duplicate"), "{detail}"),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn raw_tmax_below_tmin_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let daily = full_year_daily(&|d, c| (d == 7 && c == 1).then(|| Some("-5".to_string())));
        write_files(dir.path(), &station_line(), &daily);
        assert!(matches!(load_dataset(dir.path()), Err(DataError::ParseError { .. })));
    }

    #[test]
    fn gaps_forward_fill_and_leading_gaps_zero_fill() {
        let dir = tempfile::tempdir().unwrap();
        // SWE missing on days 0..=2 (leading -> 0.0) and on day 10
        // (forward-fill from day 9). Within the 18-day allowance.
        let daily = full_year_daily(&|d, c| {
            (c == 0 && (d <= 2 || d == 10)).then(|| None)
        });
        write_files(dir.path(), &station_line(), &daily);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.swe(0, 0, 0), 0.0);
        assert_eq!(ds.swe(0, 0, 2), 0.0);
        assert_eq!(ds.swe(0, 0, 3), 3.0);
        assert_eq!(ds.swe(0, 0, 10), 9.0); // carried from day 9
        assert_eq!(ds.swe(0, 0, 11), 11.0);
    }

    #[test]
    fn post_fill_temperature_conflict_is_repaired() {
        let dir = tempfile::tempdir().unwrap();
        // tmin observed at 2.0 on day 0 while tmax starts missing; tmax
        // zero-fills to 0.0 < 2.0, which must be repaired to tmin = tmax.
        let daily = full_year_daily(&|d, c| {
            if d == 0 && c == 1 {
                Some(None) // tmax missing
            } else if d == 0 && c == 2 {
                Some(Some("2.0".to_string())) // tmin observed above the fill
            } else {
                None
            }
        });
        write_files(dir.path(), &station_line(), &daily);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.series(0, 0).values[(1, 0)], 0.0);
        assert_eq!(ds.series(0, 0).values[(2, 0)], 0.0);
    }

    #[test]
    fn excess_missing_swe_drops_the_station() {
        let dir = tempfile::tempdir().unwrap();
        let stations = format!(
            "{}\nS001,45.0,-114.0,5000,0.1,3,ridge\nS002,46.0,-115.0,6000,0.2,4,ridge\n",
            STATION_HEADER.join(",")
        );
        // S001 full year; S002 only 100 of 180 days -> 80 missing > 18.
        let mut daily = full_year_daily(&|_, _| None);
        for d in 0..100 {
            daily.push_str(&format!("S002,1991,{d},{},1,0,{},100,3,90,40,0.004,250,247\n", d, d));
        }
        write_files(dir.path(), &stations, &daily);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.stations().len(), 1);
        assert_eq!(ds.stations()[0].station_id, "S001");
    }

    #[test]
    fn all_stations_filtered_yields_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        // Single station with only 10 days of data: 170 missing.
        let mut daily = format!("{}\n", DAILY_HEADER.join(","));
        for d in 0..10 {
            daily.push_str(&format!("S001,1991,{d},{},1,0,{},100,3,90,40,0.004,250,247\n", d, d));
        }
        write_files(dir.path(), &station_line(), &daily);
        assert!(matches!(load_dataset(dir.path()), Err(DataError::EmptyDataset)));
    }

    #[test]
    fn tb_diff_is_recomputed_from_the_channels() {
        let dir = tempfile::tempdir().unwrap();
        let daily = full_year_daily(&|d, c| {
            if d == 3 && c == 9 {
                Some(Some("260.5".to_string()))
            } else if d == 3 && c == 10 {
                Some(Some("251.25".to_string()))
            } else {
                None
            }
        });
        write_files(dir.path(), &station_line(), &daily);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.series(0, 0).values[(11, 3)], 260.5 - 251.25);
        assert_eq!(ds.series(0, 0).values[(11, 0)], 3.0);
    }
}
