//! GP checkpoint persistence. Exact checkpoints store the training features
//! and residuals and refactorize on load; sparse checkpoints store the
//! precomputed factors directly.

use std::fs;
use std::path::Path;

use super::fit::GpMode;
use super::predict::{GpModel, Posterior};
use super::{GpError, GpHyperparams};
use crate::numerics::{cholesky_with_jitter, solve_lower, solve_lower_transpose};
use crate::Mat;

const FORMAT: &str = "foreswe-gp-v1";

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointFile {
    format: String,
    season_days: usize,
    mode: GpMode,
    y_mean: f64,
    y_std: f64,
    hyperparams: GpHyperparams,
    objective_history: Vec<f64>,
    posterior: PosteriorRecord,
}

#[derive(serde::Serialize, serde::Deserialize)]
enum PosteriorRecord {
    Exact { features: Mat, times: Vec<usize>, res_std: Vec<f64> },
    Sparse { inducing_p: Mat, anchor_times: Vec<usize>, l_mm: Mat, l_b: Mat, proj: Vec<f64> },
}

/// Serialize the fitted model as pretty JSON at `path`.
pub fn save_checkpoint(model: &GpModel, path: &Path) -> Result<(), GpError> {
    let posterior = match &model.posterior {
        Posterior::Exact { features, times, res_std, .. } => PosteriorRecord::Exact {
            features: features.clone(),
            times: times.clone(),
            res_std: res_std.data().to_vec(),
        },
        Posterior::Sparse { inducing_p, anchor_times, l_mm, l_b, proj } => {
            PosteriorRecord::Sparse {
                inducing_p: inducing_p.clone(),
                anchor_times: anchor_times.clone(),
                l_mm: l_mm.clone(),
                l_b: l_b.clone(),
                proj: proj.data().to_vec(),
            }
        }
    };
    let record = CheckpointFile {
        format: FORMAT.into(),
        season_days: model.season_days,
        mode: model.mode,
        y_mean: model.y_mean,
        y_std: model.y_std,
        hyperparams: model.hyperparams.clone(),
        objective_history: model.objective_history.clone(),
        posterior,
    };
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| GpError::Checkpoint { detail: e.to_string() })?;
    fs::write(path, json)?;
    Ok(())
}

fn check_matrix(m: &Mat, what: &str) -> Result<(), GpError> {
    if !m.shape_consistent() || !m.all_finite() {
        return Err(GpError::Checkpoint { detail: format!("corrupt {what} matrix") });
    }
    Ok(())
}

/// Load a model saved by [`save_checkpoint`], validating the format tag and
/// stored shapes and rebuilding the predictive factors where needed.
pub fn load_checkpoint(path: &Path) -> Result<GpModel, GpError> {
    let json = fs::read_to_string(path)?;
    let record: CheckpointFile = serde_json::from_str(&json)
        .map_err(|e| GpError::Checkpoint { detail: e.to_string() })?;
    if record.format != FORMAT {
        return Err(GpError::Checkpoint {
            detail: format!("format tag {:?} is not {FORMAT:?}", record.format),
        });
    }
    record.hyperparams.validate()?;
    let hp = &record.hyperparams;

    let posterior = match record.posterior {
        PosteriorRecord::Exact { features, times, res_std } => {
            check_matrix(&features, "feature")?;
            let n = features.rows();
            if times.len() != n || res_std.len() != n || features.cols() != hp.d_gp() {
                return Err(GpError::Checkpoint {
                    detail: "exact posterior shapes are inconsistent".into(),
                });
            }
            if times.iter().any(|&t| t >= hp.table_size()) {
                return Err(GpError::Checkpoint {
                    detail: "stored day index outside the embedding table".into(),
                });
            }
            let mut k = hp.cross_gram(&times, &features, &times, &features);
            let noise = hp.noise_var();
            for i in 0..n {
                k[(i, i)] += noise;
            }
            let (chol, _) = cholesky_with_jitter(&k)?;
            let res = Mat::col_vec(&res_std);
            let w = solve_lower(&chol, &res);
            let alpha = solve_lower_transpose(&chol, &w);
            Posterior::Exact { features, times, res_std: res, chol, alpha }
        }
        PosteriorRecord::Sparse { inducing_p, anchor_times, l_mm, l_b, proj } => {
            check_matrix(&inducing_p, "inducing position")?;
            check_matrix(&l_mm, "L_mm")?;
            check_matrix(&l_b, "L_B")?;
            let p = anchor_times.len();
            let consistent = inducing_p.rows() == p
                && inducing_p.cols() == hp.d_gp()
                && l_mm.shape() == (p, p)
                && l_b.shape() == (p, p)
                && proj.len() == p;
            if !consistent {
                return Err(GpError::Checkpoint {
                    detail: "sparse posterior shapes are inconsistent".into(),
                });
            }
            if anchor_times.iter().any(|&t| t >= hp.table_size()) {
                return Err(GpError::Checkpoint {
                    detail: "stored anchor index outside the embedding table".into(),
                });
            }
            Posterior::Sparse { inducing_p, anchor_times, l_mm, l_b, proj: Mat::col_vec(&proj) }
        }
    };

    if !(record.y_std > 0.0) || !record.y_mean.is_finite() {
        return Err(GpError::Checkpoint { detail: "corrupt target scaling".into() });
    }
    Ok(GpModel {
        hyperparams: record.hyperparams,
        season_days: record.season_days,
        mode: record.mode,
        y_mean: record.y_mean,
        y_std: record.y_std,
        objective_history: record.objective_history,
        posterior,
    })
}

#[cfg(test)]
mod tests {
    use super::super::fit::{fit, GpFitConfig, GpMode};
    use super::super::GpTrainingSet;
    use super::*;

    fn train_set(n: usize) -> GpTrainingSet {
        let features = Mat::from_fn(n, 2, |i, j| ((i * 2 + j) as f64 * 0.59).sin());
        let time_indices: Vec<usize> = (0..n).map(|i| (2 * i) % 15).collect();
        let targets: Vec<f64> =
            (0..n).map(|i| 3.0 + (features[(i, 0)] * 2.0).cos() * 1.7).collect();
        GpTrainingSet { features, time_indices, targets, season_days: 15, table_size: 18 }
    }

    fn assert_same_predictions(a: &GpModel, b: &GpModel) {
        let query = Mat::from_fn(5, 2, |i, j| (i as f64 - j as f64) * 0.31);
        let days = vec![1usize, 4, 7, 10, 13];
        let (mu_a, var_a) = a.predict(&query, &days).unwrap();
        let (mu_b, var_b) = b.predict(&query, &days).unwrap();
        assert_eq!(mu_a, mu_b, "means changed across the round trip");
        assert_eq!(var_a, var_b, "variances changed across the round trip");
    }

    #[test]
    fn exact_checkpoint_round_trips_to_identical_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exact.json");
        let cfg = GpFitConfig { mode: GpMode::Exact, iterations: 3, ..GpFitConfig::default() };
        let model = fit(&train_set(20), &cfg).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.mode, GpMode::Exact);
        assert_eq!(loaded.objective_history, model.objective_history);
        assert_same_predictions(&model, &loaded);
    }

    #[test]
    fn sparse_checkpoint_round_trips_to_identical_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sparse.json");
        let cfg = GpFitConfig {
            mode: GpMode::Sparse { inducing: 6 },
            iterations: 3,
            ..GpFitConfig::default()
        };
        let model = fit(&train_set(20), &cfg).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.mode, GpMode::Sparse { inducing: 6 });
        assert_same_predictions(&model, &loaded);
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let cfg = GpFitConfig { mode: GpMode::Exact, iterations: 0, ..GpFitConfig::default() };
        let model = fit(&train_set(8), &cfg).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let json = std::fs::read_to_string(&path).unwrap();
        let tampered = json.replace("foreswe-gp-v1", "foreswe-gp-v0");
        std::fs::write(&path, tampered).unwrap();
        match load_checkpoint(&path) {
            Err(GpError::Checkpoint { detail }) => assert!(detail.contains("format tag")),
            other => panic!("expected a checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn unparseable_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(GpError::Checkpoint { .. })));
    }
}
