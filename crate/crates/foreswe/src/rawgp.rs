//! Raw-feature GP baseline: the same coregionalized GP head fit directly on
//! hand-built station features instead of learned representations.
//!
//! Each training point pairs a 21-dimensional feature vector (six spatial
//! features, the twelve current-day attributes, and three derived SWE
//! statistics) with one horizon target. Features are standardized with
//! constants frozen from the training split.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::data::{DataError, Dataset, ForecastMode, ATTR_SWE, NUM_ATTRIBUTES, SEASON_DAYS};
use crate::gp::{
    load_checkpoint, save_checkpoint, GpError, GpFitConfig, GpForecast, GpModel, GpTrainingSet,
};
use crate::model::{spatial_features, FeatureScaling, SPATIAL_FEATURES};
use crate::Mat;

/// Trailing days feeding the derived SWE statistics (mean and slope).
pub const TRAILING_DAYS: usize = 7;

/// Total feature width: spatial + current-day attributes + derived.
pub const RAW_FEATURE_COUNT: usize = SPATIAL_FEATURES + NUM_ATTRIBUTES + 3;

/// Format tag of baseline checkpoints.
pub const RAWGP_CHECKPOINT_FORMAT: &str = "rawgp-v1";

/// Errors surfaced by the baseline.
#[derive(Debug)]
pub enum RawGpError {
    /// Anchor day lacks the trailing history for the derived features.
    InsufficientHistory { global_day: usize, needed: usize },
    /// Configuration or input shape violates a documented invariant.
    InvalidConfig { detail: String },
    /// Checkpoint serialization or validation failure.
    Checkpoint { detail: String },
    /// Propagated dataset failure.
    Data(DataError),
    /// Propagated GP failure.
    Gp(GpError),
    /// Filesystem failure.
    Io { detail: String },
}

impl fmt::Display for RawGpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawGpError::InsufficientHistory { global_day, needed } => write!(
                f,
                "global day {global_day} lacks the {needed} trailing days for derived features"
            ),
            RawGpError::InvalidConfig { detail } => write!(f, "invalid baseline config: {detail}"),
            RawGpError::Checkpoint { detail } => write!(f, "baseline checkpoint: {detail}"),
            RawGpError::Data(e) => write!(f, "data failure: {e}"),
            RawGpError::Gp(e) => write!(f, "gp failure: {e}"),
            RawGpError::Io { detail } => write!(f, "io failure: {detail}"),
        }
    }
}

impl std::error::Error for RawGpError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            RawGpError::Data(e) => Some(e),
            RawGpError::Gp(e) => Some(e),
            _ => None,
        }
    }
}

impl From<DataError> for RawGpError {
    fn from(e: DataError) -> Self {
        RawGpError::Data(e)
    }
}

impl From<GpError> for RawGpError {
    fn from(e: GpError) -> Self {
        RawGpError::Gp(e)
    }
}

impl From<std::io::Error> for RawGpError {
    fn from(e: std::io::Error) -> Self {
        RawGpError::Io { detail: e.to_string() }
    }
}

/// The 21 raw features of one station at anchor `(year_index, t)`:
///
/// * indices `0..6` — the spatial features (latitude, longitude, elevation,
///   southness, day number, day length);
/// * indices `6..18` — the twelve attributes observed on the anchor day;
/// * index `18` — mean SWE over the trailing [`TRAILING_DAYS`] days
///   (anchor inclusive, crossing year boundaries backward);
/// * index `19` — least-squares SWE slope (mm/day) over the same days;
/// * index `20` — season-to-date maximum SWE (days `0..=t` of the anchor
///   year).
pub fn raw_features(
    dataset: &Dataset,
    station_index: usize,
    year_index: usize,
    t: usize,
) -> Result<[f64; RAW_FEATURE_COUNT], RawGpError> {
    let g = year_index * SEASON_DAYS + t;
    if g + 1 < TRAILING_DAYS {
        return Err(RawGpError::InsufficientHistory { global_day: g, needed: TRAILING_DAYS });
    }
    let mut out = [0.0; RAW_FEATURE_COUNT];
    let spatial = spatial_features(&dataset.stations()[station_index], t);
    out[..SPATIAL_FEATURES].copy_from_slice(&spatial);
    for a in 0..NUM_ATTRIBUTES {
        out[SPATIAL_FEATURES + a] = dataset.value_at(station_index, a, g);
    }

    let trailing: Vec<f64> = (0..TRAILING_DAYS)
        .map(|back| dataset.value_at(station_index, ATTR_SWE, g - back))
        .collect();
    let n = TRAILING_DAYS as f64;
    let mean = trailing.iter().sum::<f64>() / n;
    // Least-squares slope against day offsets 0, -1, .., -(TRAILING_DAYS-1).
    let x_mean = -(n - 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (back, &y) in trailing.iter().enumerate() {
        let dx = -(back as f64) - x_mean;
        cov += dx * (y - mean);
        var += dx * dx;
    }
    let season_max =
        (0..=t).map(|d| dataset.value_at(station_index, ATTR_SWE, year_index * SEASON_DAYS + d))
            .fold(f64::NEG_INFINITY, f64::max);

    out[SPATIAL_FEATURES + NUM_ATTRIBUTES] = mean;
    out[SPATIAL_FEATURES + NUM_ATTRIBUTES + 1] = cov / var;
    out[SPATIAL_FEATURES + NUM_ATTRIBUTES + 2] = season_max;
    Ok(out)
}

/// The trained baseline: frozen feature standardization plus the GP.
#[derive(Debug)]
pub struct RawGpModel {
    pub scaling: FeatureScaling,
    pub gp: GpModel,
}

impl RawGpModel {
    /// Standardize raw feature rows with the frozen constants.
    fn standardize_rows(&self, raw: &Mat) -> Result<Mat, RawGpError> {
        if raw.cols() != RAW_FEATURE_COUNT {
            return Err(RawGpError::InvalidConfig {
                detail: format!("feature rows must be {RAW_FEATURE_COUNT} wide, got {}", raw.cols()),
            });
        }
        Ok(Mat::from_fn(raw.rows(), raw.cols(), |i, j| self.scaling.standardize(j, raw[(i, j)])))
    }

    /// Forecast every station at anchor `(year_index, t)` over the horizon.
    pub fn forecast(
        &self,
        dataset: &Dataset,
        year_index: usize,
        t: usize,
        horizon: usize,
        mode: ForecastMode,
    ) -> Result<GpForecast, RawGpError> {
        let n = dataset.stations().len();
        let mut raw = Mat::zeros(n, RAW_FEATURE_COUNT);
        for s in 0..n {
            let features = raw_features(dataset, s, year_index, t)?;
            for (j, &v) in features.iter().enumerate() {
                raw[(s, j)] = v;
            }
        }
        let standardized = self.standardize_rows(&raw)?;
        Ok(self.gp.forecast(&standardized, t, horizon, mode.stride())?)
    }
}

/// Assemble the baseline training set over the given anchors: one point per
/// (anchor, station, horizon step), the feature row frozen at the anchor and
/// the time index at the target day. Feature standardization constants come
/// from exactly these rows.
pub fn build_training_set(
    dataset: &Dataset,
    anchors: &[(usize, usize)],
    horizon: usize,
    mode: ForecastMode,
) -> Result<(GpTrainingSet, FeatureScaling, Vec<usize>), RawGpError> {
    if anchors.is_empty() || horizon == 0 {
        return Err(RawGpError::InvalidConfig {
            detail: "need at least one anchor and a positive horizon".into(),
        });
    }
    let stride = mode.stride();
    let n_stations = dataset.stations().len();
    let mut raw_rows: Vec<[f64; RAW_FEATURE_COUNT]> = Vec::new();
    let mut times = Vec::new();
    let mut targets = Vec::new();
    let mut anchor_rows = Vec::new();
    for &(year_index, t) in anchors {
        for station in 0..n_stations {
            let features = raw_features(dataset, station, year_index, t)?;
            for step in 1..=horizon {
                let target_t = t + step * stride;
                if target_t >= SEASON_DAYS {
                    return Err(RawGpError::InvalidConfig {
                        detail: format!(
                            "anchor day {t} step {step} lands outside the {SEASON_DAYS}-day season"
                        ),
                    });
                }
                anchor_rows.push(t);
                raw_rows.push(features);
                times.push(target_t);
                targets.push(dataset.value_at(
                    station,
                    ATTR_SWE,
                    year_index * SEASON_DAYS + target_t,
                ));
            }
        }
    }

    let columns: Vec<Vec<f64>> = (0..RAW_FEATURE_COUNT)
        .map(|j| raw_rows.iter().map(|row| row[j]).collect())
        .collect();
    let scaling = FeatureScaling::fit_columns(&columns);
    let features = Mat::from_fn(raw_rows.len(), RAW_FEATURE_COUNT, |i, j| {
        scaling.standardize(j, raw_rows[i][j])
    });
    let train = GpTrainingSet {
        features,
        time_indices: times,
        targets,
        season_days: SEASON_DAYS,
        table_size: SEASON_DAYS,
    };
    Ok((train, scaling, anchor_rows))
}

/// Fit the baseline on the given anchors.
pub fn fit_raw_gp(
    dataset: &Dataset,
    anchors: &[(usize, usize)],
    horizon: usize,
    mode: ForecastMode,
    config: &GpFitConfig,
) -> Result<RawGpModel, RawGpError> {
    let (train, scaling, _) = build_training_set(dataset, anchors, horizon, mode)?;
    let gp = crate::gp::fit(&train, config)?;
    Ok(RawGpModel { scaling, gp })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BaselineFile {
    format: String,
    scaling: FeatureScaling,
}

/// Write the baseline into `dir` as `rawgp.json` (tag + scaling) plus
/// `rawgp-gp.json` (the GP checkpoint).
pub fn save_raw_gp(dir: &Path, model: &RawGpModel) -> Result<(), RawGpError> {
    fs::create_dir_all(dir)?;
    if model.scaling.dim() != RAW_FEATURE_COUNT {
        return Err(RawGpError::Checkpoint {
            detail: format!("scaling must cover {RAW_FEATURE_COUNT} features"),
        });
    }
    let file = BaselineFile {
        format: RAWGP_CHECKPOINT_FORMAT.to_string(),
        scaling: model.scaling.clone(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| RawGpError::Checkpoint { detail: e.to_string() })?;
    fs::write(dir.join("rawgp.json"), json)?;
    save_checkpoint(&model.gp, &dir.join("rawgp-gp.json"))?;
    Ok(())
}

/// Load a baseline saved by [`save_raw_gp`].
pub fn load_raw_gp(dir: &Path) -> Result<RawGpModel, RawGpError> {
    let text = fs::read_to_string(dir.join("rawgp.json"))?;
    let file: BaselineFile = serde_json::from_str(&text)
        .map_err(|e| RawGpError::Checkpoint { detail: format!("unparseable: {e}") })?;
    if file.format != RAWGP_CHECKPOINT_FORMAT {
        return Err(RawGpError::Checkpoint {
            detail: format!(
                "unknown format tag {:?}, expected {RAWGP_CHECKPOINT_FORMAT:?}",
                file.format
            ),
        });
    }
    if file.scaling.dim() != RAW_FEATURE_COUNT {
        return Err(RawGpError::Checkpoint {
            detail: format!("scaling must cover {RAW_FEATURE_COUNT} features"),
        });
    }
    let gp = load_checkpoint(&dir.join("rawgp-gp.json"))?;
    Ok(RawGpModel { scaling: file.scaling, gp })
}
