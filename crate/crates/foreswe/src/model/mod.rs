//! The attention encoder: location embeddings, temporal attribute
//! aggregation, window-wise concatenation, geodesically biased spatial
//! attention, dimension reduction, and MSE pretraining.
//!
//! One day's batch flows through five stages:
//!
//! 1. **Location embedding** — an affine map of six spatial features
//!    (latitude, longitude, elevation, southness, day number, day length)
//!    plus a frozen per-`prompt_key` seeded vector.
//! 2. **Temporal aggregation** — per window, each attribute's history is
//!    embedded to `d_model` and a single-query attention (query = the
//!    location embedding) mixes the attribute rows.
//! 3. **Concatenation** — the per-window outputs join into one row of width
//!    `C * d_model` per location.
//! 4. **Spatial attention** — scores between locations are softmaxed, biased
//!    by normalized pairwise distance and angularity (weights `w_H`,
//!    `w_theta`), and softmaxed again; the double application is deliberate
//!    and controlled by [`EncoderConfig::inner_softmax`].
//! 5. **Reduction** — a linear map to `d_gp` produces the representation
//!    consumed by the GP head; a linear head on top of it drives MSE
//!    pretraining against the `h`-step targets.

mod checkpoint;
mod params;
mod pretrain;

use std::fmt;

use crate::data::{DataError, ForecastMode, Resolution, StationMeta, WindowSpec};
use crate::numerics::NumericsError;

pub use checkpoint::{load_encoder_checkpoint, save_encoder_checkpoint};
pub use params::{encode_day, EncoderParams};
pub use pretrain::{build_day_batches, pretrain, DayBatch, PretrainOutcome};

/// Errors surfaced by the encoder.
#[derive(Debug)]
pub enum ModelError {
    /// Configuration violates a documented invariant.
    InvalidConfig { detail: String },
    /// Operand shapes disagree with the parameter shapes.
    ShapeMismatch { detail: String },
    /// An operation that needs at least one example received none.
    EmptyBatch,
    /// A day batch mixed examples from different anchor days.
    MixedAnchorDays { detail: String },
    /// A value that must be finite was NaN or infinite.
    NonFinite { context: String },
    /// Training loss or gradients became non-finite.
    Divergence { epoch: usize },
    /// Checkpoint serialization or validation failure.
    Checkpoint { detail: String },
    /// Propagated numeric failure.
    Numerical(NumericsError),
    /// Propagated dataset failure.
    Data(DataError),
    /// Filesystem failure.
    Io { detail: String },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidConfig { detail } => write!(f, "invalid encoder config: {detail}"),
            ModelError::ShapeMismatch { detail } => write!(f, "shape mismatch: {detail}"),
            ModelError::EmptyBatch => write!(f, "operation requires a non-empty batch"),
            ModelError::MixedAnchorDays { detail } => {
                write!(f, "batch mixes anchor days: {detail}")
            }
            ModelError::NonFinite { context } => {
                write!(f, "non-finite value encountered in {context}")
            }
            ModelError::Divergence { epoch } => {
                write!(f, "pretraining diverged at epoch {epoch}")
            }
            ModelError::Checkpoint { detail } => write!(f, "encoder checkpoint: {detail}"),
            ModelError::Numerical(e) => write!(f, "numerical failure: {e}"),
            ModelError::Data(e) => write!(f, "data failure: {e}"),
            ModelError::Io { detail } => write!(f, "io failure: {detail}"),
        }
    }
}

impl std::error::Error for ModelError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ModelError::Numerical(e) => Some(e),
            ModelError::Data(e) => Some(e),
            _ => None,
        }
    }
}

impl From<NumericsError> for ModelError {
    fn from(e: NumericsError) -> Self {
        ModelError::Numerical(e)
    }
}

impl From<DataError> for ModelError {
    fn from(e: DataError) -> Self {
        ModelError::Data(e)
    }
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io { detail: e.to_string() }
    }
}

/// Architecture of the encoder. `windows` fixes both the window count `C`
/// and each window's resolution and length.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Embedding width of every attention stage.
    pub d_model: usize,
    /// History windows, one temporal-attention block each.
    pub windows: Vec<WindowSpec>,
    /// Reduced representation width fed to the GP head.
    pub d_gp: usize,
    /// Pretraining target steps.
    pub horizon: usize,
    /// Cadence of the horizon targets.
    pub forecast_mode: ForecastMode,
    /// Apply the inner softmax to the scaled spatial scores before adding
    /// the geodesic biases (the published form); `false` adds the biases to
    /// the raw scaled scores instead.
    pub inner_softmax: bool,
    /// Seed for weight initialization and prompt vectors.
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: `d_model` 64, a 30-day daily window plus a
    /// 26-sample weekly window, reduction to 8, horizon from the mode.
    pub fn desk_default(mode: ForecastMode) -> Self {
        EncoderConfig {
            d_model: 64,
            windows: vec![
                WindowSpec { resolution: Resolution::Daily, k: 30 },
                WindowSpec { resolution: Resolution::Weekly, k: 26 },
            ],
            d_gp: 8,
            horizon: mode.default_horizon(),
            forecast_mode: mode,
            inner_softmax: true,
            seed: 0,
        }
    }

    /// Window count `C`.
    pub fn window_count(&self) -> usize {
        self.windows.len()
    }

    /// Width of the concatenated per-location row, `C * d_model`.
    pub fn concat_dim(&self) -> usize {
        self.window_count() * self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_gp == 0 || self.horizon == 0 {
            return Err(ModelError::InvalidConfig {
                detail: "d_model, d_gp, and horizon must be positive".into(),
            });
        }
        if self.d_gp >= self.d_model {
            return Err(ModelError::InvalidConfig {
                detail: format!("d_gp {} must be below d_model {}", self.d_gp, self.d_model),
            });
        }
        if self.windows.is_empty() {
            return Err(ModelError::InvalidConfig { detail: "at least one window".into() });
        }
        if self.windows.iter().any(|w| w.k == 0) {
            return Err(ModelError::InvalidConfig { detail: "window length k must be positive".into() });
        }
        Ok(())
    }
}

/// The encoder's output for one location on one day: the reduced vector `r`
/// paired with its day index, ready for the GP head's space-time input
/// `z = (r, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRepresentation {
    /// Reduced representation, length `d_gp`.
    pub r: Vec<f64>,
    /// Season day index of the anchor.
    pub t: usize,
    /// Station index within the dataset ordering.
    pub location_index: usize,
}

/// Per-dimension affine standardization constants, frozen at fit time.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureScaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaling {
    /// Guard every standard deviation away from zero.
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), std.len(), "scaling dimensions disagree");
        let std = std.into_iter().map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        FeatureScaling { mean, std }
    }

    /// No-op scaling of the given dimension.
    pub fn identity(dim: usize) -> Self {
        FeatureScaling { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Population mean/std per column, columns supplied as value vectors.
    pub fn fit_columns(columns: &[Vec<f64>]) -> Self {
        let mut mean = Vec::with_capacity(columns.len());
        let mut std = Vec::with_capacity(columns.len());
        for col in columns {
            let n = col.len().max(1) as f64;
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(var.sqrt());
        }
        FeatureScaling::new(mean, std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, dim: usize, v: f64) -> f64 {
        (v - self.mean[dim]) / self.std[dim]
    }
}

/// Every data-derived constant the encoder freezes at pretraining time:
/// feature and target standardization plus the geodesic normalization
/// ranges, all carried by the checkpoint.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderScalings {
    /// Six spatial features of the location embedding.
    pub spatial: FeatureScaling,
    /// Twelve daily attributes of the history windows.
    pub attributes: FeatureScaling,
    /// Pretraining targets (one shared dimension).
    pub targets: FeatureScaling,
    /// Raw min/max of pairwise haversine distances (meters).
    pub distance_range: (f64, f64),
    /// Raw min/max of pairwise angularities (degrees).
    pub angularity_range: (f64, f64),
}

impl EncoderScalings {
    /// No-op scalings, for unit tests of the forward math.
    pub fn identity() -> Self {
        EncoderScalings {
            spatial: FeatureScaling::identity(SPATIAL_FEATURES),
            attributes: FeatureScaling::identity(crate::data::NUM_ATTRIBUTES),
            targets: FeatureScaling::identity(1),
            distance_range: (0.0, 1.0),
            angularity_range: (0.0, 1.0),
        }
    }
}

/// Number of spatial features feeding the location embedding.
pub const SPATIAL_FEATURES: usize = 6;

/// Daylight duration in hours at the given latitude on season day `t`
/// (`t = 0` is December 1, non-leap calendar).
///
/// Solar declination comes from Spencer's Fourier series; the day length is
/// the standard sunrise-hour-angle formula, clamped for polar day/night.
pub fn day_length_hours(lat_deg: f64, t: usize) -> f64 {
    use std::f64::consts::PI;
    let doy = ((334 + t) % 365) + 1;
    let gamma = 2.0 * PI * (doy as f64 - 1.0) / 365.0;
    let decl = 0.006918 - 0.399912 * gamma.cos() + 0.070257 * gamma.sin()
        - 0.006758 * (2.0 * gamma).cos()
        + 0.000907 * (2.0 * gamma).sin()
        - 0.002697 * (3.0 * gamma).cos()
        + 0.00148 * (3.0 * gamma).sin();
    let x = (-lat_deg.to_radians().tan() * decl.tan()).clamp(-1.0, 1.0);
    24.0 * x.acos() / PI
}

/// The six raw spatial features of a station on day `t`: latitude,
/// longitude, elevation (meters), southness, day number, day length.
pub fn spatial_features(meta: &StationMeta, t: usize) -> [f64; SPATIAL_FEATURES] {
    [
        meta.geo.lat_deg(),
        meta.geo.lon_deg(),
        meta.geo.elevation_m(),
        meta.southness,
        t as f64,
        day_length_hours(meta.geo.lat_deg(), t),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent daylight oracle: declination from the asin-of-cosine
    /// approximation (a different derivation than the Fourier series used by
    /// the implementation), same hour-angle conversion.
    fn oracle_day_length(lat_deg: f64, t: usize) -> f64 {
        use std::f64::consts::PI;
        let n = (((334 + t) % 365) + 1) as f64;
        let inner = 0.98565f64.to_radians() * (n - 2.0);
        let angle = 0.98565f64.to_radians() * (n + 10.0)
            + 1.914f64.to_radians() * inner.sin();
        let decl = -(0.39779 * angle.cos()).asin();
        let x = (-lat_deg.to_radians().tan() * decl.tan()).clamp(-1.0, 1.0);
        24.0 * x.acos() / PI
    }

    #[test]
    fn day_length_matches_an_independent_solar_formula() {
        for t in 0..180 {
            let ours = day_length_hours(47.0, t);
            let oracle = oracle_day_length(47.0, t);
            assert!(
                (ours - oracle).abs() < 0.2,
                "day {t}: {ours:.3} h vs oracle {oracle:.3} h"
            );
        }
    }

    #[test]
    fn day_length_has_the_right_seasonal_shape() {
        // Around the winter solstice (t = 20 is Dec 21) days are shortest;
        // by late May (t = 170) they are much longer at 47 N.
        let solstice = day_length_hours(47.0, 20);
        let late_spring = day_length_hours(47.0, 170);
        assert!(solstice < 9.0, "solstice day {solstice:.2} h");
        assert!(late_spring > 14.5, "late-spring day {late_spring:.2} h");
        // Equator: always close to 12 h.
        for t in [0, 60, 120, 179] {
            let eq = day_length_hours(0.0, t);
            assert!((eq - 12.0).abs() < 0.25, "equator day {t}: {eq:.2} h");
        }
    }

    #[test]
    fn polar_night_and_day_clamp_cleanly() {
        assert_eq!(day_length_hours(85.0, 20), 0.0);
        let t_summerish = 179; // late May, high north latitude
        assert!(day_length_hours(85.0, t_summerish) > 23.9);
    }

    #[test]
    fn scaling_fit_and_standardize_round_trip() {
        let scaling = FeatureScaling::fit_columns(&[vec![2.0, 4.0], vec![5.0, 5.0]]);
        assert!((scaling.mean[0] - 3.0).abs() < 1e-12);
        assert!((scaling.standardize(0, 4.0) - 1.0).abs() < 1e-12);
        // Degenerate column: std guards to 1, standardize centers only.
        assert_eq!(scaling.std[1], 1.0);
        assert_eq!(scaling.standardize(1, 5.0), 0.0);
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let good = EncoderConfig::desk_default(ForecastMode::Daily);
        good.validate().unwrap();
        assert_eq!(good.window_count(), 2);
        assert_eq!(good.concat_dim(), 128);
        assert_eq!(good.horizon, 10);

        let mut too_wide = good.clone();
        too_wide.d_gp = 64;
        assert!(matches!(too_wide.validate(), Err(ModelError::InvalidConfig { .. })));

        let mut no_windows = good.clone();
        no_windows.windows.clear();
        assert!(no_windows.validate().is_err());

        let weekly = EncoderConfig::desk_default(ForecastMode::Weekly);
        assert_eq!(weekly.horizon, 4);
    }
}
