//! Predictive posterior for the fitted GP head: means, variances, and
//! central intervals in physical units, for either inference regime.

use super::fit::GpMode;
use super::{GpError, GpHyperparams, TargetScaler};
use crate::numerics::{cholesky_with_jitter, normal_quantile, solve_lower, solve_lower_transpose};
use crate::Mat;

/// Fitted GP head with everything needed for prediction.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyperparams: GpHyperparams,
    pub season_days: usize,
    pub mode: GpMode,
    /// Target standardization frozen at fit time (physical units).
    pub y_mean: f64,
    pub y_std: f64,
    /// Objective value per iteration, including the final state.
    pub objective_history: Vec<f64>,
    pub(crate) posterior: Posterior,
}

/// Precomputed factors for prediction. Residuals and factors live in
/// standardized target units.
#[derive(Debug, Clone)]
pub(crate) enum Posterior {
    Exact {
        features: Mat,
        times: Vec<usize>,
        /// Standardized residuals `y_std - m(z)`, kept for refitting the
        /// factors after deserialization.
        res_std: Mat,
        chol: Mat,
        alpha: Mat,
    },
    Sparse {
        inducing_p: Mat,
        anchor_times: Vec<usize>,
        l_mm: Mat,
        l_b: Mat,
        /// `L_B^{-1} A res / s2`, a column vector.
        proj: Mat,
    },
}

/// Forecast block for one anchor day: rows are locations, columns are
/// horizon steps.
#[derive(Debug, Clone)]
pub struct GpForecast {
    pub means: Mat,
    pub vars: Mat,
    /// Day index of each horizon step within the season.
    pub target_times: Vec<usize>,
}

/// Exact posterior: factorize `K + s2 I` and cache `alpha = (K + s2 I)^{-1} res`.
pub(crate) fn build_exact_posterior(
    hp: &GpHyperparams,
    features: &Mat,
    times: &[usize],
    y_std: &[f64],
) -> Result<Posterior, GpError> {
    let n = y_std.len();
    let mut k = hp.cross_gram(times, features, times, features);
    let noise = hp.noise_var();
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let (chol, _) = cholesky_with_jitter(&k)?;
    let mean = hp.mean(features);
    let res_std = Mat::from_fn(n, 1, |i, _| y_std[i] - mean[i]);
    let w = solve_lower(&chol, &res_std);
    let alpha = solve_lower_transpose(&chol, &w);
    Ok(Posterior::Exact { features: features.clone(), times: times.to_vec(), res_std, chol, alpha })
}

/// Sparse posterior: Cholesky factors of `K_mm` and
/// `B = I + A A' / s2` (with `A = L_mm^{-1} K_mn`), plus the projected
/// residual used by the predictive mean.
pub(crate) fn build_sparse_posterior(
    hp: &GpHyperparams,
    features: &Mat,
    times: &[usize],
    y_std: &[f64],
    inducing_p: Mat,
    anchor_times: Vec<usize>,
) -> Result<Posterior, GpError> {
    let n = y_std.len();
    let p = anchor_times.len();
    let kmm = hp.cross_gram(&anchor_times, &inducing_p, &anchor_times, &inducing_p);
    let (l_mm, _) = cholesky_with_jitter(&kmm)?;
    let kmn = hp.cross_gram(&anchor_times, &inducing_p, times, features);
    let a = solve_lower(&l_mm, &kmn);

    let inv_noise = 1.0 / hp.noise_var();
    let mut b_inner = a.matmul_nt(&a);
    for v in 0..p {
        for w in 0..p {
            b_inner[(v, w)] *= inv_noise;
        }
        b_inner[(v, v)] += 1.0;
    }
    let (l_b, _) = cholesky_with_jitter(&b_inner)?;

    let mean = hp.mean(features);
    let res = Mat::from_fn(n, 1, |i, _| y_std[i] - mean[i]);
    let ares = a.matmul(&res);
    let mut proj = solve_lower(&l_b, &ares);
    for v in 0..p {
        proj[(v, 0)] *= inv_noise;
    }
    Ok(Posterior::Sparse { inducing_p, anchor_times, l_mm, l_b, proj })
}

impl GpModel {
    fn scaler(&self) -> TargetScaler {
        TargetScaler { mean: self.y_mean, std: self.y_std }
    }

    /// Posterior predictive mean and variance (physical units, noise
    /// included) at the given feature rows and day indices.
    pub fn predict(&self, features: &Mat, times: &[usize]) -> Result<(Vec<f64>, Vec<f64>), GpError> {
        let q = features.rows();
        if features.cols() != self.hyperparams.d_gp() {
            return Err(GpError::InvalidConfig {
                detail: format!(
                    "feature width {} does not match the model dimension {}",
                    features.cols(),
                    self.hyperparams.d_gp()
                ),
            });
        }
        if times.len() != q {
            return Err(GpError::InvalidConfig {
                detail: format!("{} day indices for {} feature rows", times.len(), q),
            });
        }
        let table = self.hyperparams.table_size();
        if let Some(&t) = times.iter().find(|&&t| t >= table) {
            return Err(GpError::HorizonOutOfRange {
                anchor: t,
                target: t,
                season_days: table,
            });
        }

        let hp = &self.hyperparams;
        let prior = hp.prior_diag(times);
        let mean_fn = hp.mean(features);
        let noise = hp.noise_var();
        let scaler = self.scaler();

        let (mu_std, var_std): (Vec<f64>, Vec<f64>) = match &self.posterior {
            Posterior::Exact { features: train_f, times: train_t, chol, alpha, .. } => {
                let kx = hp.cross_gram(times, features, train_t, train_f);
                let v = solve_lower(chol, &kx.transpose());
                let mut mu = Vec::with_capacity(q);
                let mut var = Vec::with_capacity(q);
                for i in 0..q {
                    let m: f64 = kx
                        .row(i)
                        .iter()
                        .enumerate()
                        .map(|(j, &k)| k * alpha[(j, 0)])
                        .sum();
                    let explained: f64 = (0..v.rows()).map(|r| v[(r, i)] * v[(r, i)]).sum();
                    mu.push(m + mean_fn[i]);
                    var.push((prior[i] - explained).max(0.0) + noise);
                }
                (mu, var)
            }
            Posterior::Sparse { inducing_p, anchor_times, l_mm, l_b, proj } => {
                let kmx = hp.cross_gram(anchor_times, inducing_p, times, features);
                let a_star = solve_lower(l_mm, &kmx);
                let t_star = solve_lower(l_b, &a_star);
                let p = anchor_times.len();
                let mut mu = Vec::with_capacity(q);
                let mut var = Vec::with_capacity(q);
                for i in 0..q {
                    let m: f64 = (0..p).map(|r| t_star[(r, i)] * proj[(r, 0)]).sum();
                    let a2: f64 = (0..p).map(|r| a_star[(r, i)] * a_star[(r, i)]).sum();
                    let t2: f64 = (0..p).map(|r| t_star[(r, i)] * t_star[(r, i)]).sum();
                    mu.push(m + mean_fn[i]);
                    var.push((prior[i] - a2 + t2).max(0.0) + noise);
                }
                (mu, var)
            }
        };

        let means = mu_std.iter().map(|&m| scaler.invert_mean(m)).collect();
        let vars = var_std.iter().map(|&v| scaler.invert_var(v)).collect();
        Ok((means, vars))
    }

    /// Roll the posterior forward from `anchor_time`: one prediction per
    /// location (row of `features`) at each of `horizon` steps of `stride`
    /// days. Targets past the end of the season are refused.
    pub fn forecast(
        &self,
        features: &Mat,
        anchor_time: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<GpForecast, GpError> {
        if horizon == 0 || stride == 0 {
            return Err(GpError::InvalidConfig {
                detail: "horizon and stride must be at least 1".into(),
            });
        }
        let mut target_times = Vec::with_capacity(horizon);
        for step in 1..=horizon {
            let target = anchor_time + step * stride;
            if target >= self.season_days {
                return Err(GpError::HorizonOutOfRange {
                    anchor: anchor_time,
                    target,
                    season_days: self.season_days,
                });
            }
            target_times.push(target);
        }

        let n = features.rows();
        let mut means = Mat::zeros(n, horizon);
        let mut vars = Mat::zeros(n, horizon);
        for (col, &t) in target_times.iter().enumerate() {
            let day = vec![t; n];
            let (mu, var) = self.predict(features, &day)?;
            for i in 0..n {
                means[(i, col)] = mu[i];
                vars[(i, col)] = var[i];
            }
        }
        Ok(GpForecast { means, vars, target_times })
    }
}

/// Central interval `mean +/- z sqrt(var)` at confidence `alpha` in (0, 1),
/// with `z` the standard normal quantile at `(1 + alpha) / 2`.
pub fn interval(mean: f64, var: f64, alpha: f64) -> (f64, f64) {
    assert!(alpha > 0.0 && alpha < 1.0, "confidence level must lie in (0, 1), got {alpha}");
    let z = normal_quantile((1.0 + alpha) / 2.0);
    let half = z * var.max(0.0).sqrt();
    (mean - half, mean + half)
}
