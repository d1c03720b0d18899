//! Synthetic mountain-station dataset generator.
//!
//! The generator produces physically plausible seasonal SWE trajectories with
//! the structure the models are built to exploit:
//!
//! * peak SWE rises with elevation and latitude and varies by water year;
//! * peak amplitude and peak timing carry *spatially correlated* anomalies
//!   (correlation length 250 km), so neighboring stations are informative
//!   about one another;
//! * the brightness-temperature difference `tb19v - tb37v` tracks SWE, giving
//!   the attribute histories real predictive content;
//! * accumulated precipitation is non-decreasing and consistent with SWE
//!   gains.
//!
//! All randomness is sub-seeded per (seed, station, year) so the output is a
//! pure function of the inputs, independent of iteration order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DailySeries, Dataset, StationMeta, NUM_ATTRIBUTES, SEASON_DAYS};
use crate::numerics::cholesky_with_jitter;
use crate::{geo, Mat};

/// Spatial correlation length of year-to-year anomalies, meters.
const ANOMALY_CORR_LENGTH_M: f64 = 250_000.0;

/// Configuration of [`generate_synthetic`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub n_stations: usize,
    pub n_years: usize,
    pub start_year: i32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { n_stations: 16, n_years: 8, start_year: 1991, seed: 0 }
    }
}

use crate::numerics::splitmix64;

/// Derive an independent stream seed from the master seed and a path of
/// integers (station index, year index, purpose tag, ..).
fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(seed ^ 0xD6E8_FEB8_6659_FD93);
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

fn sub_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, parts))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Cubic smoothstep on [0, 1].
fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn prompt_key_for_elevation(elevation_ft: f64) -> &'static str {
    if elevation_ft < 4500.0 {
        "sheltered-valley-forest-site"
    } else if elevation_ft < 6500.0 {
        "montane-mixed-forest-site"
    } else if elevation_ft < 8500.0 {
        "subalpine-open-ridge-site"
    } else {
        "alpine-exposed-tundra-site"
    }
}

/// Randomly place `n_stations` across the interior mountain west.
fn place_stations(n_stations: usize, seed: u64) -> Vec<StationMeta> {
    let mut rng = sub_rng(seed, &[0x5741]);
    (0..n_stations)
        .map(|i| {
            let lat = 40.0 + 8.5 * rng.random::<f64>();
            let lon = -124.0 + 18.0 * rng.random::<f64>();
            let elevation_ft = 2500.0 + 9000.0 * rng.random::<f64>();
            let southness = -1.0 + 2.0 * rng.random::<f64>();
            let land_cover = rng.random_range(1..=8u8);
            StationMeta::new(
                format!("S{:03}", i + 1),
                lat,
                lon,
                elevation_ft,
                southness,
                land_cover,
                prompt_key_for_elevation(elevation_ft),
            )
            .expect("sampled coordinates are always in range")
        })
        .collect()
}

/// Cholesky factor of the inter-station anomaly correlation matrix.
fn anomaly_factor(stations: &[StationMeta]) -> Mat {
    let n = stations.len();
    let corr = Mat::from_fn(n, n, |i, j| {
        let d = geo::haversine(&stations[i].geo, &stations[j].geo);
        (-d / ANOMALY_CORR_LENGTH_M).exp()
    });
    let (l, _) = cholesky_with_jitter(&corr).expect("correlation matrix is positive definite");
    l
}

/// Draw one spatially correlated standard-normal field.
fn correlated_field(l: &Mat, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = l.rows();
    let z = Mat::col_vec(&(0..n).map(|_| normal(rng)).collect::<Vec<f64>>());
    let f = l.matmul(&z);
    (0..n).map(|i| f[(i, 0)]).collect()
}

/// Deterministic per-season shape parameters for one station-year.
struct SeasonShape {
    peak_swe: f64,
    start_day: f64,
    peak_day: f64,
    melt_end_day: f64,
}

impl SeasonShape {
    /// Noise-free SWE trajectory value at day `d`.
    fn clean_swe(&self, d: f64) -> f64 {
        if d < self.start_day {
            0.0
        } else if d <= self.peak_day {
            self.peak_swe * smoothstep((d - self.start_day) / (self.peak_day - self.start_day))
        } else if d <= self.melt_end_day {
            self.peak_swe
                * (1.0 - smoothstep((d - self.peak_day) / (self.melt_end_day - self.peak_day)))
        } else {
            0.0
        }
    }
}

/// Generate one station-year of daily attributes.
fn synthesize_station_year(
    meta: &StationMeta,
    shape: &SeasonShape,
    rng: &mut ChaCha8Rng,
) -> Mat {
    let mut values = Mat::zeros(NUM_ATTRIBUTES, SEASON_DAYS);
    let elev_m = meta.elevation_ft * geo::FEET_TO_METERS;

    // SWE: smoothstep accumulation/melt skeleton plus AR(1) noise tapered to
    // zero where the clean trajectory is snow-free.
    let mut ar = 0.0;
    let noise_scale = 0.02 * shape.peak_swe;
    for d in 0..SEASON_DAYS {
        let clean = shape.clean_swe(d as f64);
        ar = 0.92 * ar + noise_scale * normal(rng);
        let taper = (clean / (0.1 * shape.peak_swe + 1e-9)).min(1.0);
        values[(0, d)] = (clean + taper * ar).max(0.0);
    }

    // Air temperature: seasonal cycle, elevation lapse, AR(1) weather.
    let mut tmax_ar = 0.0;
    for d in 0..SEASON_DAYS {
        let seasonal = 8.0 - 13.0 * (std::f64::consts::TAU * (d as f64 - 45.0) / 365.0).cos();
        let lapse = -6.5 * (elev_m - 760.0) / 1000.0;
        tmax_ar = 0.8 * tmax_ar + 1.8 * normal(rng);
        let tmax = seasonal + lapse + tmax_ar;
        let gap = 5.0 + 3.0 * normal(rng).abs();
        values[(1, d)] = tmax;
        values[(2, d)] = tmax - gap;
    }

    // Accumulated precipitation: SWE gains plus occasional rain events.
    let mut accum = 0.0;
    for d in 0..SEASON_DAYS {
        let swe_gain = if d == 0 {
            values[(0, 0)]
        } else {
            (values[(0, d)] - values[(0, d - 1)]).max(0.0)
        };
        let rain = if rng.random::<f64>() < 0.10 {
            let u: f64 = rng.random();
            2.0 + 12.0 * u * u
        } else {
            0.0
        };
        accum += swe_gain + rain;
        values[(3, d)] = accum;
    }

    // Shortwave radiation ramps up into spring.
    for d in 0..SEASON_DAYS {
        let ramp = 65.0 + 185.0 * (d as f64 / (SEASON_DAYS - 1) as f64).powf(1.3);
        values[(4, d)] = (ramp + 18.0 * normal(rng)).max(5.0);
    }

    // Wind speed: half-normal around a mild seasonal base.
    for d in 0..SEASON_DAYS {
        let base = 1.5 + 0.5 * (std::f64::consts::TAU * d as f64 / 365.0).cos();
        values[(5, d)] = (base + 2.2 * normal(rng).abs()).clamp(0.2, 25.0);
    }

    // Relative humidity: moist early winter drying into spring.
    for d in 0..SEASON_DAYS {
        let rhmax = (92.0 - 0.12 * d as f64 + 6.0 * normal(rng)).clamp(30.0, 100.0);
        let rhmin = (rhmax - 18.0 - 14.0 * rng.random::<f64>() - 8.0 * normal(rng).abs())
            .clamp(5.0, rhmax);
        values[(6, d)] = rhmax;
        values[(7, d)] = rhmin;
    }

    // Specific humidity follows the Clausius-Clapeyron-ish rise with tmin.
    for d in 0..SEASON_DAYS {
        let q = 0.0038 * (0.062 * values[(2, d)]).exp() * (1.0 + 0.05 * normal(rng));
        values[(8, d)] = q.max(0.0002);
    }

    // Passive-microwave brightness temperatures. The 19V-37V difference
    // carries the SWE signal; 37V is set from the difference so the stored
    // derived column is bitwise consistent.
    for d in 0..SEASON_DAYS {
        let tb19 = 254.0 + 0.35 * values[(1, d)] + 2.0 * normal(rng);
        let diff = (3.0 + 0.055 * values[(0, d)] + 0.8 * normal(rng)).max(0.2);
        let tb37 = tb19 - diff;
        values[(9, d)] = tb19;
        values[(10, d)] = tb37;
        values[(11, d)] = tb19 - tb37;
    }

    values
}

/// Generate a complete dataset over prescribed stations.
///
/// Deterministic in `(stations, start_year, n_years, seed)`; per-station-year
/// noise streams are independent of iteration order.
pub fn synthesize_dataset(
    stations: Vec<StationMeta>,
    start_year: i32,
    n_years: usize,
    seed: u64,
) -> Dataset {
    assert!(!stations.is_empty() && n_years > 0, "need at least one station and one year");
    let years: Vec<i32> = (0..n_years).map(|y| start_year + y as i32).collect();
    let l = anomaly_factor(&stations);

    let mut series: Vec<Vec<DailySeries>> = vec![Vec::with_capacity(n_years); stations.len()];
    for (y, &year) in years.iter().enumerate() {
        // Region-wide year character: snow-volume multiplier and phase shift.
        let mut year_rng = sub_rng(seed, &[0x5945, y as u64]);
        let scale_z = normal(&mut year_rng);
        let phase_z = normal(&mut year_rng);
        let year_scale = (0.18 * scale_z - 0.5 * 0.18 * 0.18).exp();
        let year_phase = 8.0 * phase_z;

        // Spatially correlated anomaly fields for amplitude and timing.
        let mut spatial_rng = sub_rng(seed, &[0x5350, y as u64]);
        let amp_field = correlated_field(&l, &mut spatial_rng);
        let phase_field = correlated_field(&l, &mut spatial_rng);

        for (s, meta) in stations.iter().enumerate() {
            let elev_kft = meta.elevation_ft / 1000.0;
            let base =
                80.0 + 55.0 * (elev_kft - 2.5) + 10.0 * (meta.geo.lat_deg() - 40.0);
            let peak_swe = (base * year_scale * (1.0 + 0.12 * amp_field[s])).max(30.0);
            let peak_day = (105.0 + year_phase + 10.0 * phase_field[s]).clamp(85.0, 125.0);

            let mut rng = sub_rng(seed, &[0x4459, s as u64, y as u64]);
            let start_day = 5.0 + 10.0 * rng.random::<f64>();
            let melt_end_day =
                (peak_day + 45.0 + 15.0 * (peak_swe / 400.0)).clamp(peak_day + 10.0, 176.0);
            let shape = SeasonShape { peak_swe, start_day, peak_day, melt_end_day };
            let values = synthesize_station_year(meta, &shape, &mut rng);
            series[s].push(DailySeries {
                station_id: meta.station_id.clone(),
                water_year: year,
                values,
            });
        }
    }

    Dataset::new(stations, years, series).expect("generator output satisfies all invariants")
}

/// Generate a dataset with randomly placed stations.
pub fn generate_synthetic(config: &SyntheticConfig) -> Dataset {
    let stations = place_stations(config.n_stations, config.seed);
    synthesize_dataset(stations, config.start_year, config.n_years, config.seed)
}
