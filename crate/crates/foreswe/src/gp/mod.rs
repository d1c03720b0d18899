//! Coregionalized Gaussian-process forecast head.
//!
//! The prediction target at a space-time point `z = (r, t)` — `r` the encoded
//! location representation, `t` the day index within the season — is modeled
//! as a GP with mean `m(z) = gamma0 + gamma1' r` and kernel
//!
//! ```text
//! kappa(z, z') = sum_c zeta(t, c) * zeta(t', c) * sig_c^2
//!                * exp(-||r - r'||^2 / (2 * len_c^2))
//! ```
//!
//! a linear model of coregionalization: each component `c` owns an RBF over
//! the spatial representation, and the scalar temporal mixing weights
//! `zeta(t, c) = b_c' h_t` come from a learned per-day embedding table `h`
//! and per-component vectors `b_c`. Targets are standardized inside `fit`;
//! predictions are mapped back to physical units.
//!
//! Two fitting regimes share the hyperparameters: an exact marginal
//! likelihood for small problems and a collapsed variational lower bound with
//! inducing points for large ones. Inducing points are inter-domain: spatial
//! positions are free parameters while each point's temporal mixing row is
//! anchored to the day index of a real training point, which keeps the bound
//! valid and makes the sparse model collapse to the exact one when every
//! training point is an inducing point.

mod checkpoint;
mod fit;
mod predict;

use std::error::Error;
use std::fmt;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use fit::{
    exact_nlml, fit, kmeans_pp_indices, sparse_bound_objective, GpFitConfig, GpMode,
    MAX_EXACT_POINTS,
};
pub use predict::{interval, GpForecast, GpModel};

use crate::numerics::NumericsError;
use crate::Mat;

/// Number of coregionalization components used by the pipeline.
pub const DEFAULT_COMPONENTS: usize = 3;

/// Width of the learned per-day temporal embedding.
pub const TIME_EMBED_DIM: usize = 4;

/// Errors surfaced by GP fitting, prediction, and checkpointing.
#[derive(Debug)]
pub enum GpError {
    /// Configuration or input shapes are inconsistent.
    InvalidConfig { detail: String },
    /// Exact inference was requested beyond its size guard.
    TooLarge { n: usize, max: usize },
    /// A forecast target day falls outside the season.
    HorizonOutOfRange { anchor: usize, target: usize, season_days: usize },
    /// The objective or a gradient became non-finite during training.
    Divergence { iteration: usize },
    /// Checkpoint (de)serialization failure.
    Checkpoint { detail: String },
    /// Linear-algebra failure.
    Numerical(NumericsError),
    /// Checkpoint file I/O failure.
    Io { detail: String },
}

impl fmt::Display for GpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GpError::InvalidConfig { detail } => write!(f, "invalid GP configuration: {detail}"),
            GpError::TooLarge { n, max } => {
                write!(f, "exact inference over {n} points exceeds the limit of {max}")
            }
            GpError::HorizonOutOfRange { anchor, target, season_days } => write!(
                f,
                "forecast from day {anchor} reaches day {target}, past the {season_days}-day season"
            ),
            GpError::Divergence { iteration } => {
                write!(f, "training diverged at iteration {iteration}")
            }
            GpError::Checkpoint { detail } => write!(f, "checkpoint error: {detail}"),
            GpError::Numerical(e) => write!(f, "numerical failure: {e}"),
            GpError::Io { detail } => write!(f, "io error: {detail}"),
        }
    }
}

impl Error for GpError {}

impl From<NumericsError> for GpError {
    fn from(e: NumericsError) -> Self {
        GpError::Numerical(e)
    }
}

impl From<std::io::Error> for GpError {
    fn from(e: std::io::Error) -> Self {
        GpError::Io { detail: e.to_string() }
    }
}

/// All learned GP quantities. Every field is a named parameter on the
/// training tape; shapes are fixed at init.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GpHyperparams {
    /// Per-day temporal embeddings, `table_size x TIME_EMBED_DIM`.
    pub h_table: Mat,
    /// Per-component mixing vectors, `components x TIME_EMBED_DIM`.
    pub b_mix: Mat,
    /// Log length-scales, `components x 1`.
    pub log_len: Mat,
    /// Log amplitudes, `components x 1`.
    pub log_sig: Mat,
    /// Log observation-noise variance, `1 x 1` (standardized target units).
    pub log_noise: Mat,
    /// Mean intercept, `1 x 1`.
    pub gamma0: Mat,
    /// Mean slope over the spatial representation, `d_gp x 1`.
    pub gamma1: Mat,
}

impl GpHyperparams {
    /// Initial values: near-constant temporal mixing (so the kernel starts
    /// close to a plain sum of RBFs with unit prior variance), length-scales
    /// spread geometrically around `length_scale`, 10% noise, zero mean.
    pub fn init(
        d_gp: usize,
        table_size: usize,
        components: usize,
        length_scale: f64,
        seed: u64,
    ) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x4750_494E_4954);
        let base = 1.0 / (TIME_EMBED_DIM as f64).sqrt();
        let mut jittered =
            |rows: usize, cols: usize| Mat::from_fn(rows, cols, |_, _| {
                base + 0.1 * (2.0 * rng.random::<f64>() - 1.0)
            });
        let h_table = jittered(table_size, TIME_EMBED_DIM);
        let b_mix = jittered(components, TIME_EMBED_DIM);
        let log_len = Mat::from_fn(components, 1, |c, _| {
            let spread = if components == 1 {
                0.0
            } else {
                -0.7 + 1.4 * c as f64 / (components - 1) as f64
            };
            (length_scale.max(1e-6)).ln() + spread
        });
        let log_sig = Mat::filled(components, 1, (1.0 / components as f64).ln() / 2.0);
        GpHyperparams {
            h_table,
            b_mix,
            log_len,
            log_sig,
            log_noise: Mat::scalar(0.1f64.ln()),
            gamma0: Mat::scalar(0.0),
            gamma1: Mat::zeros(d_gp, 1),
        }
    }

    pub fn components(&self) -> usize {
        self.log_len.rows()
    }

    pub fn d_gp(&self) -> usize {
        self.gamma1.rows()
    }

    pub fn table_size(&self) -> usize {
        self.h_table.rows()
    }

    /// Temporal mixing weights `zeta(t, c) = b_c' h_t` for one day.
    pub fn zeta_row(&self, t: usize) -> Vec<f64> {
        assert!(t < self.table_size(), "time index {t} outside embedding table");
        (0..self.components())
            .map(|c| {
                self.b_mix
                    .row(c)
                    .iter()
                    .zip(self.h_table.row(t))
                    .map(|(&b, &h)| b * h)
                    .sum()
            })
            .collect()
    }

    /// Stacked `zeta` rows, `times.len() x components`.
    pub fn zeta_matrix(&self, times: &[usize]) -> Mat {
        let rows: Vec<Vec<f64>> = times.iter().map(|&t| self.zeta_row(t)).collect();
        Mat::from_rows(&rows)
    }

    pub fn lengths(&self) -> Vec<f64> {
        (0..self.components()).map(|c| self.log_len[(c, 0)].exp()).collect()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        (0..self.components()).map(|c| self.log_sig[(c, 0)].exp()).collect()
    }

    /// Observation-noise variance in standardized target units.
    pub fn noise_var(&self) -> f64 {
        self.log_noise.as_scalar().exp()
    }

    /// Mean function values `gamma0 + gamma1' r` for each feature row.
    pub fn mean(&self, features: &Mat) -> Vec<f64> {
        assert_eq!(features.cols(), self.d_gp(), "feature width mismatch in mean");
        let g0 = self.gamma0.as_scalar();
        (0..features.rows())
            .map(|i| {
                g0 + features
                    .row(i)
                    .iter()
                    .zip(self.gamma1.data())
                    .map(|(&r, &g)| r * g)
                    .sum::<f64>()
            })
            .collect()
    }

    /// Scalar kernel evaluation between two space-time points.
    pub fn kernel(&self, zeta_a: &[f64], r_a: &[f64], zeta_b: &[f64], r_b: &[f64]) -> f64 {
        kernel_lmc(zeta_a, r_a, zeta_b, r_b, &self.lengths(), &self.sigmas())
    }

    /// Cross-Gram matrix between two sets of space-time points.
    pub fn cross_gram(
        &self,
        times_a: &[usize],
        feat_a: &Mat,
        times_b: &[usize],
        feat_b: &Mat,
    ) -> Mat {
        let za = self.zeta_matrix(times_a);
        let zb = self.zeta_matrix(times_b);
        let lengths = self.lengths();
        let sigmas = self.sigmas();
        Mat::from_fn(times_a.len(), times_b.len(), |i, j| {
            kernel_lmc(za.row(i), feat_a.row(i), zb.row(j), feat_b.row(j), &lengths, &sigmas)
        })
    }

    /// Prior variances `kappa(z, z)` for a set of points.
    pub fn prior_diag(&self, times: &[usize]) -> Vec<f64> {
        let sigmas = self.sigmas();
        times
            .iter()
            .map(|&t| {
                self.zeta_row(t)
                    .iter()
                    .zip(&sigmas)
                    .map(|(&z, &s)| z * z * s * s)
                    .sum()
            })
            .collect()
    }

    /// Shape consistency check for values that bypassed the constructors.
    pub fn validate(&self) -> Result<(), GpError> {
        let tau = self.components();
        let checks = [
            (self.h_table.cols() == TIME_EMBED_DIM, "h_table width"),
            (self.b_mix.shape() == (tau, TIME_EMBED_DIM), "b_mix shape"),
            (self.log_sig.shape() == (tau, 1), "log_sig shape"),
            (self.log_noise.shape() == (1, 1), "log_noise shape"),
            (self.gamma0.shape() == (1, 1), "gamma0 shape"),
            (self.gamma1.cols() == 1, "gamma1 shape"),
        ];
        for (ok, what) in checks {
            if !ok {
                return Err(GpError::InvalidConfig { detail: format!("bad {what}") });
            }
        }
        let all = [
            &self.h_table,
            &self.b_mix,
            &self.log_len,
            &self.log_sig,
            &self.log_noise,
            &self.gamma0,
            &self.gamma1,
        ];
        for m in all {
            if !m.shape_consistent() || !m.all_finite() {
                return Err(GpError::InvalidConfig {
                    detail: "hyperparameter storage is corrupt or non-finite".into(),
                });
            }
        }
        Ok(())
    }
}

/// Reference scalar kernel:
/// `sum_c zeta_a[c] zeta_b[c] sig_c^2 exp(-||r_a - r_b||^2 / (2 len_c^2))`.
pub fn kernel_lmc(
    zeta_a: &[f64],
    r_a: &[f64],
    zeta_b: &[f64],
    r_b: &[f64],
    lengths: &[f64],
    sigmas: &[f64],
) -> f64 {
    debug_assert_eq!(r_a.len(), r_b.len());
    debug_assert_eq!(zeta_a.len(), lengths.len());
    let d2: f64 = r_a.iter().zip(r_b).map(|(&a, &b)| (a - b) * (a - b)).sum();
    zeta_a
        .iter()
        .zip(zeta_b)
        .zip(lengths.iter().zip(sigmas))
        .map(|((&za, &zb), (&len, &sig))| za * zb * sig * sig * (-d2 / (2.0 * len * len)).exp())
        .sum()
}

/// One training set for the GP head: one row per (location, target-day) pair.
#[derive(Debug, Clone)]
pub struct GpTrainingSet {
    /// Spatial representations, `n x d_gp`.
    pub features: Mat,
    /// Day index of each target within the embedding table.
    pub time_indices: Vec<usize>,
    /// Observed values in physical units.
    pub targets: Vec<f64>,
    /// Days per season; forecasts may not cross this boundary.
    pub season_days: usize,
    /// Temporal embedding table size (at least `season_days`).
    pub table_size: usize,
}

impl GpTrainingSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn validate(&self) -> Result<(), GpError> {
        let n = self.features.rows();
        if n == 0 {
            return Err(GpError::InvalidConfig { detail: "empty training set".into() });
        }
        if self.time_indices.len() != n || self.targets.len() != n {
            return Err(GpError::InvalidConfig {
                detail: format!(
                    "inconsistent lengths: {} features, {} times, {} targets",
                    n,
                    self.time_indices.len(),
                    self.targets.len()
                ),
            });
        }
        if self.table_size < self.season_days {
            return Err(GpError::InvalidConfig {
                detail: "embedding table smaller than the season".into(),
            });
        }
        if let Some(&t) = self.time_indices.iter().find(|&&t| t >= self.table_size) {
            return Err(GpError::InvalidConfig {
                detail: format!("time index {t} outside table of size {}", self.table_size),
            });
        }
        if !self.features.all_finite() || self.targets.iter().any(|y| !y.is_finite()) {
            return Err(GpError::InvalidConfig { detail: "non-finite training values".into() });
        }
        Ok(())
    }
}

/// Affine scaler fit on training targets.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        TargetScaler { mean, std }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert_mean(&self, v: f64) -> f64 {
        self.mean + self.std * v
    }

    pub fn invert_var(&self, v: f64) -> f64 {
        self.std * self.std * v
    }
}
