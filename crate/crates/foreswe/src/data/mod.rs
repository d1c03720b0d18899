//! Station metadata, daily attribute series, dataset assembly, windowing,
//! and peak-SWE grouping.
//!
//! Conventions shared by every consumer:
//!
//! * A water year spans [`SEASON_DAYS`] days indexed 0-based from December 1.
//! * Each station-year holds a dense `12 x SEASON_DAYS` attribute matrix in
//!   [`ATTRIBUTE_NAMES`] order; after ingestion there are no missing values.
//! * `tb_diff_k` is derived (`tb19v_k - tb37v_k`) and never stored on disk.
//! * A dataset is a complete station-by-year grid: stations whose coverage
//!   fails the missing-SWE filter are dropped entirely.

mod groups;
mod load;
mod synthetic;
mod windows;

use std::error::Error;
use std::fmt;

pub use groups::{group_by_peak_swe, PeakGroups};
pub use load::{load_dataset, write_dataset};
pub use synthetic::{generate_synthetic, synthesize_dataset, SyntheticConfig};
pub use windows::{anchor_days, build_windows, targets_for, valid_anchor, window_for, WindowedExample};

use crate::geo::GeoPoint;
use crate::Mat;

/// Days per water year, counted from December 1.
pub const SEASON_DAYS: usize = 180;

/// Number of dynamic daily attributes (including the derived `tb_diff_k`).
pub const NUM_ATTRIBUTES: usize = 12;

/// Attribute order used by every `12 x SEASON_DAYS` matrix in the crate.
pub const ATTRIBUTE_NAMES: [&str; NUM_ATTRIBUTES] = [
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
    "tb_diff_k",
];

/// Row index of SWE within the attribute matrix.
pub const ATTR_SWE: usize = 0;
/// Row index of the derived brightness-temperature difference.
pub const ATTR_TB_DIFF: usize = 11;

/// Errors surfaced by ingestion, windowing, and splitting.
#[derive(Debug)]
pub enum DataError {
    /// Header mismatch, unknown station reference, or structural defect.
    SchemaError { detail: String },
    /// A row failed to parse or violated a value invariant.
    ParseError { row: usize, detail: String },
    /// No stations or no daily rows survive ingestion.
    EmptyDataset,
    /// A window or target cannot be resolved for the requested day.
    InsufficientHistory { station: String, water_year: i32, t: usize },
    /// Split years are inconsistent with each other or the dataset.
    InvalidSplit { detail: String },
    /// Underlying file I/O failure.
    Io { detail: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::SchemaError { detail } => write!(f, "schema error: {detail}"),
            DataError::ParseError { row, detail } => write!(f, "parse error at row {row}: {detail}"),
            DataError::EmptyDataset => write!(f, "dataset is empty after ingestion"),
            DataError::InsufficientHistory { station, water_year, t } => write!(
                f,
                "insufficient history for station {station}, water year {water_year}, day {t}"
            ),
            DataError::InvalidSplit { detail } => write!(f, "invalid split: {detail}"),
            DataError::Io { detail } => write!(f, "io error: {detail}"),
        }
    }
}

impl Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io { detail: e.to_string() }
    }
}

/// Static description of one station.
#[derive(Debug, Clone, PartialEq)]
pub struct StationMeta {
    pub station_id: String,
    /// Elevation exactly as stored in station files (feet).
    pub elevation_ft: f64,
    /// Geodesic position; elevation already converted to meters.
    pub geo: GeoPoint,
    /// Southness index in [-1, 1] (1 = due-south aspect).
    pub southness: f64,
    /// Land-cover class code.
    pub land_cover: u8,
    /// Identifier of a fixed site-descriptor prompt; stations may share keys.
    pub prompt_key: String,
}

impl StationMeta {
    pub fn new(
        station_id: impl Into<String>,
        lat_deg: f64,
        lon_deg: f64,
        elevation_ft: f64,
        southness: f64,
        land_cover: u8,
        prompt_key: impl Into<String>,
    ) -> Result<Self, DataError> {
        let geo = GeoPoint::new(lat_deg, lon_deg, elevation_ft * crate::geo::FEET_TO_METERS)
            .map_err(|e| DataError::SchemaError { detail: e.to_string() })?;
        if !(-1.0..=1.0).contains(&southness) {
            return Err(DataError::SchemaError {
                detail: format!("southness {southness} outside [-1, 1]"),
            });
        }
        Ok(StationMeta {
            station_id: station_id.into(),
            elevation_ft,
            geo,
            southness,
            land_cover,
            prompt_key: prompt_key.into(),
        })
    }
}

/// One station-year of daily attributes: a dense `12 x SEASON_DAYS` matrix.
///
/// Invariants (checked by [`DailySeries::validate`]): all values finite,
/// SWE non-negative, `tmax_c >= tmin_c` daily, and `tb_diff_k` equal to
/// `tb19v_k - tb37v_k` to within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct DailySeries {
    pub station_id: String,
    pub water_year: i32,
    /// `NUM_ATTRIBUTES x SEASON_DAYS`, attribute-major.
    pub values: Mat,
}

impl DailySeries {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.values.shape() != (NUM_ATTRIBUTES, SEASON_DAYS) {
            return Err(DataError::SchemaError {
                detail: format!(
                    "series for {} year {} has shape {:?}",
                    self.station_id,
                    self.water_year,
                    self.values.shape()
                ),
            });
        }
        for d in 0..SEASON_DAYS {
            for a in 0..NUM_ATTRIBUTES {
                let v = self.values[(a, d)];
                if !v.is_finite() {
                    return Err(DataError::SchemaError {
                        detail: format!(
                            "non-finite {} on day {d} for {} year {}",
                            ATTRIBUTE_NAMES[a], self.station_id, self.water_year
                        ),
                    });
                }
            }
            if self.values[(ATTR_SWE, d)] < 0.0 {
                return Err(DataError::SchemaError {
                    detail: format!(
                        "negative SWE on day {d} for {} year {}",
                        self.station_id, self.water_year
                    ),
                });
            }
            if self.values[(1, d)] < self.values[(2, d)] {
                return Err(DataError::SchemaError {
                    detail: format!(
                        "tmax < tmin on day {d} for {} year {}",
                        self.station_id, self.water_year
                    ),
                });
            }
            let diff = self.values[(9, d)] - self.values[(10, d)];
            if (self.values[(ATTR_TB_DIFF, d)] - diff).abs() > 1e-9 {
                return Err(DataError::SchemaError {
                    detail: format!(
                        "tb_diff inconsistent on day {d} for {} year {}",
                        self.station_id, self.water_year
                    ),
                });
            }
        }
        Ok(())
    }
}

/// A complete station-by-year grid of daily series.
#[derive(Debug, Clone)]
pub struct Dataset {
    stations: Vec<StationMeta>,
    /// Sorted ascending.
    years: Vec<i32>,
    /// `series[station_index][year_index]`.
    series: Vec<Vec<DailySeries>>,
}

impl Dataset {
    /// Assemble from parts, enforcing the complete-grid invariant.
    pub fn new(
        stations: Vec<StationMeta>,
        years: Vec<i32>,
        series: Vec<Vec<DailySeries>>,
    ) -> Result<Self, DataError> {
        if stations.is_empty() || years.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        if years.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::SchemaError { detail: "years must be sorted and unique".into() });
        }
        if series.len() != stations.len() {
            return Err(DataError::SchemaError { detail: "series grid height mismatch".into() });
        }
        for (s, row) in series.iter().enumerate() {
            if row.len() != years.len() {
                return Err(DataError::SchemaError {
                    detail: format!("station {} lacks a full year grid", stations[s].station_id),
                });
            }
            for (y, ds) in row.iter().enumerate() {
                if ds.station_id != stations[s].station_id || ds.water_year != years[y] {
                    return Err(DataError::SchemaError {
                        detail: format!(
                            "series grid misaligned at station {} year {}",
                            stations[s].station_id, years[y]
                        ),
                    });
                }
                ds.validate()?;
            }
        }
        Ok(Dataset { stations, years, series })
    }

    pub fn stations(&self) -> &[StationMeta] {
        &self.stations
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        self.years.iter().position(|&y| y == year)
    }

    pub fn series(&self, station_index: usize, year_index: usize) -> &DailySeries {
        &self.series[station_index][year_index]
    }

    /// Attribute value addressed by the global day index
    /// `year_index * SEASON_DAYS + day`.
    pub fn value_at(&self, station_index: usize, attr: usize, global_day: usize) -> f64 {
        let (y, d) = (global_day / SEASON_DAYS, global_day % SEASON_DAYS);
        self.series[station_index][y].values[(attr, d)]
    }

    /// Total days on the concatenated timeline.
    pub fn timeline_len(&self) -> usize {
        self.years.len() * SEASON_DAYS
    }

    pub fn swe(&self, station_index: usize, year_index: usize, day: usize) -> f64 {
        self.series[station_index][year_index].values[(ATTR_SWE, day)]
    }
}

/// History window resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    /// Consecutive days ending at the anchor day.
    Daily,
    /// Every 7th day backward from the anchor day.
    Weekly,
}

impl Resolution {
    /// Day step between consecutive history samples.
    pub fn stride(&self) -> usize {
        match self {
            Resolution::Daily => 1,
            Resolution::Weekly => 7,
        }
    }
}

/// One history window: `k` samples at the given resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowSpec {
    pub resolution: Resolution,
    pub k: usize,
}

impl WindowSpec {
    /// Days of history required behind the anchor day (inclusive of it).
    pub fn span(&self) -> usize {
        self.resolution.stride() * (self.k - 1)
    }
}

/// Forecast cadence: daily targets `t+1..t+h` or weekly targets
/// `t+7, .., t+7h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForecastMode {
    Daily,
    Weekly,
}

impl ForecastMode {
    /// Day step between consecutive horizon targets.
    pub fn stride(&self) -> usize {
        match self {
            ForecastMode::Daily => 1,
            ForecastMode::Weekly => 7,
        }
    }

    /// Default horizon length for the mode.
    pub fn default_horizon(&self) -> usize {
        match self {
            ForecastMode::Daily => 10,
            ForecastMode::Weekly => 4,
        }
    }
}

/// Partition of water years into buffer (history-only), training, and test.
///
/// Invariants enforced by [`SplitSpec::validate`]: the three sets are
/// disjoint and nonempty where required, buffer years precede training years,
/// training years precede test years, and test years are consecutive.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub buffer_years: Vec<i32>,
    pub train_years: Vec<i32>,
    pub test_years: Vec<i32>,
}

impl SplitSpec {
    /// Desk-scale default over the dataset's year range: the earliest three
    /// years buffer, the final year tests, the rest train.
    pub fn desk_default(years: &[i32]) -> Result<Self, DataError> {
        if years.len() < 5 {
            return Err(DataError::InvalidSplit {
                detail: format!("need at least 5 years for the default split, got {}", years.len()),
            });
        }
        Ok(SplitSpec {
            buffer_years: years[..3].to_vec(),
            train_years: years[3..years.len() - 1].to_vec(),
            test_years: years[years.len() - 1..].to_vec(),
        })
    }

    pub fn validate(&self, dataset_years: &[i32]) -> Result<(), DataError> {
        for group in [&self.buffer_years, &self.train_years, &self.test_years] {
            if group.windows(2).any(|w| w[0] >= w[1]) {
                return Err(DataError::InvalidSplit {
                    detail: "each year group must be sorted and unique".into(),
                });
            }
            for y in group {
                if !dataset_years.contains(y) {
                    return Err(DataError::InvalidSplit {
                        detail: format!("year {y} not present in dataset"),
                    });
                }
            }
        }
        if self.train_years.is_empty() || self.test_years.is_empty() {
            return Err(DataError::InvalidSplit {
                detail: "train and test year sets must be nonempty".into(),
            });
        }
        let max_buffer = self.buffer_years.iter().max();
        let min_train = self.train_years.iter().min().unwrap();
        let max_train = self.train_years.iter().max().unwrap();
        let min_test = self.test_years.iter().min().unwrap();
        if let Some(mb) = max_buffer {
            if mb >= min_train {
                return Err(DataError::InvalidSplit {
                    detail: "buffer years must precede training years".into(),
                });
            }
        }
        if max_train >= min_test {
            return Err(DataError::InvalidSplit {
                detail: "training years must precede test years".into(),
            });
        }
        if self
            .test_years
            .windows(2)
            .any(|w| w[1] != w[0] + 1)
        {
            return Err(DataError::InvalidSplit { detail: "test years must be consecutive".into() });
        }
        let mut all: Vec<i32> = self
            .buffer_years
            .iter()
            .chain(&self.train_years)
            .chain(&self.test_years)
            .copied()
            .collect();
        all.sort_unstable();
        let len = all.len();
        all.dedup();
        if all.len() != len {
            return Err(DataError::InvalidSplit { detail: "year groups must be disjoint".into() });
        }
        Ok(())
    }
}
