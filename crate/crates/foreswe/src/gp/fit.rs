//! GP hyperparameter fitting: exact marginal likelihood and the collapsed
//! variational bound, both recorded on the gradient tape and minimized with
//! Adam under global-norm clipping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::predict::{build_exact_posterior, build_sparse_posterior, GpModel};
use super::{GpError, GpHyperparams, GpTrainingSet, TargetScaler, DEFAULT_COMPONENTS};
use crate::numerics::{Adam, LmcGramSpec, NumericsError, TensorId};
use crate::{Mat, Tape};

/// Exact inference is refused beyond this many training points; use the
/// sparse mode instead.
pub const MAX_EXACT_POINTS: usize = 5000;

pub(crate) const P_H_TABLE: &str = "gp.h_table";
pub(crate) const P_B_MIX: &str = "gp.b_mix";
pub(crate) const P_LOG_LEN: &str = "gp.log_len";
pub(crate) const P_LOG_SIG: &str = "gp.log_sig";
pub(crate) const P_LOG_NOISE: &str = "gp.log_noise";
pub(crate) const P_GAMMA0: &str = "gp.gamma0";
pub(crate) const P_GAMMA1: &str = "gp.gamma1";
pub(crate) const P_INDUCING: &str = "gp.inducing_p";

/// Inference regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpMode {
    /// Full marginal likelihood; guarded by [`MAX_EXACT_POINTS`].
    Exact,
    /// Collapsed variational bound with the given number of inducing points.
    Sparse { inducing: usize },
}

/// Training configuration for [`fit`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GpFitConfig {
    pub mode: GpMode,
    pub iterations: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub components: usize,
    pub seed: u64,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        GpFitConfig {
            mode: GpMode::Sparse { inducing: 128 },
            iterations: 60,
            learning_rate: 0.05,
            clip_norm: 10.0,
            components: DEFAULT_COMPONENTS,
            seed: 0,
        }
    }
}

impl GpFitConfig {
    fn validate(&self, n: usize) -> Result<(), GpError> {
        if self.components == 0 {
            return Err(GpError::InvalidConfig { detail: "components must be at least 1".into() });
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(GpError::InvalidConfig {
                detail: "learning_rate and clip_norm must be positive".into(),
            });
        }
        match self.mode {
            GpMode::Exact if n > MAX_EXACT_POINTS => {
                Err(GpError::TooLarge { n, max: MAX_EXACT_POINTS })
            }
            GpMode::Sparse { inducing } if inducing == 0 || inducing > n => {
                Err(GpError::InvalidConfig {
                    detail: format!("inducing count {inducing} outside 1..={n}"),
                })
            }
            _ => Ok(()),
        }
    }
}

struct ParamIds {
    h: TensorId,
    b: TensorId,
    log_len: TensorId,
    log_sig: TensorId,
    log_noise: TensorId,
    gamma0: TensorId,
    gamma1: TensorId,
}

fn register_params(tape: &mut Tape, hp: &GpHyperparams) -> ParamIds {
    ParamIds {
        h: tape.param(P_H_TABLE, hp.h_table.clone()),
        b: tape.param(P_B_MIX, hp.b_mix.clone()),
        log_len: tape.param(P_LOG_LEN, hp.log_len.clone()),
        log_sig: tape.param(P_LOG_SIG, hp.log_sig.clone()),
        log_noise: tape.param(P_LOG_NOISE, hp.log_noise.clone()),
        gamma0: tape.param(P_GAMMA0, hp.gamma0.clone()),
        gamma1: tape.param(P_GAMMA1, hp.gamma1.clone()),
    }
}

fn extract_hyperparams(tape: &Tape) -> Result<GpHyperparams, GpError> {
    Ok(GpHyperparams {
        h_table: tape.param_value(P_H_TABLE)?.clone(),
        b_mix: tape.param_value(P_B_MIX)?.clone(),
        log_len: tape.param_value(P_LOG_LEN)?.clone(),
        log_sig: tape.param_value(P_LOG_SIG)?.clone(),
        log_noise: tape.param_value(P_LOG_NOISE)?.clone(),
        gamma0: tape.param_value(P_GAMMA0)?.clone(),
        gamma1: tape.param_value(P_GAMMA1)?.clone(),
    })
}

/// Residual node `y - (gamma0 + R gamma1)` shared by both objectives.
fn residual_node(tape: &mut Tape, ids: &ParamIds, r: TensorId, targets: &[f64]) -> TensorId {
    let y = tape.constant(Mat::col_vec(targets));
    let rg = tape.matmul(r, ids.gamma1);
    let mean = tape.add_scalar(rg, ids.gamma0);
    tape.sub(y, mean)
}

/// Record the exact negative log marginal likelihood:
/// `0.5 (n ln 2pi + ln|K + s2 I| + res' (K + s2 I)^{-1} res)`.
fn build_exact_tape(
    features: &Mat,
    times: &[usize],
    targets: &[f64],
    hp: &GpHyperparams,
) -> Result<Tape, GpError> {
    let n = targets.len();
    let mut tape = Tape::new();
    let ids = register_params(&mut tape, hp);
    let r = tape.constant(features.clone());
    let hs = tape.gather_rows(ids.h, times.to_vec());
    let bt = tape.transpose(ids.b);
    let z = tape.matmul(hs, bt);
    let res = residual_node(&mut tape, &ids, r, targets);

    let gram = tape.lmc_gram(LmcGramSpec {
        zl: z,
        zr: z,
        rl: r,
        rr: r,
        log_len: ids.log_len,
        log_sig: ids.log_sig,
    });
    let noise = tape.exp(ids.log_noise);
    let k = tape.add_diag(gram, noise);
    let l = tape.cholesky(k)?;
    let w = tape.solve_lower(l, res);
    let w2 = tape.hadamard(w, w);
    let quad = tape.sum_all(w2);
    let sld = tape.sum_ln_diag(l);
    let logdet = tape.scale(sld, 2.0);
    let data_terms = tape.add(quad, logdet);
    let norm = tape.constant_scalar(n as f64 * (2.0 * std::f64::consts::PI).ln());
    let total = tape.add(data_terms, norm);
    let nlml = tape.scale(total, 0.5);
    tape.mark_output(nlml)?;
    Ok(tape)
}

/// Record the negated collapsed variational bound. Inducing spatial positions
/// are a free parameter; inducing temporal mixing rows are anchored to the
/// day indices in `anchor_times` through the shared embedding table.
fn build_sparse_tape(
    features: &Mat,
    times: &[usize],
    targets: &[f64],
    hp: &GpHyperparams,
    inducing_p: &Mat,
    anchor_times: &[usize],
) -> Result<Tape, GpError> {
    let n = targets.len();
    let mut tape = Tape::new();
    let ids = register_params(&mut tape, hp);
    let p = tape.param(P_INDUCING, inducing_p.clone());
    let r = tape.constant(features.clone());
    let bt = tape.transpose(ids.b);
    let hs = tape.gather_rows(ids.h, times.to_vec());
    let z = tape.matmul(hs, bt);
    let hu = tape.gather_rows(ids.h, anchor_times.to_vec());
    let u = tape.matmul(hu, bt);
    let res = residual_node(&mut tape, &ids, r, targets);

    let kmm = tape.lmc_gram(LmcGramSpec {
        zl: u,
        zr: u,
        rl: p,
        rr: p,
        log_len: ids.log_len,
        log_sig: ids.log_sig,
    });
    let lmm = tape.cholesky(kmm)?;
    let kmn = tape.lmc_gram(LmcGramSpec {
        zl: u,
        zr: z,
        rl: p,
        rr: r,
        log_len: ids.log_len,
        log_sig: ids.log_sig,
    });
    let a = tape.solve_lower(lmm, kmn);

    let neg_log_noise = tape.neg(ids.log_noise);
    let inv_noise = tape.exp(neg_log_noise);
    let at = tape.transpose(a);
    let aat = tape.matmul(a, at);
    let aat_scaled = tape.mul_scalar(aat, inv_noise);
    let one = tape.constant_scalar(1.0);
    let b_inner = tape.add_diag(aat_scaled, one);
    let lb = tape.cholesky(b_inner)?;

    let ares = tape.matmul(a, res);
    let cvec = tape.solve_lower(lb, ares);
    let res2 = tape.hadamard(res, res);
    let res2_sum = tape.sum_all(res2);
    let fit1 = tape.mul_scalar(res2_sum, inv_noise);
    let c2 = tape.hadamard(cvec, cvec);
    let c2_sum = tape.sum_all(c2);
    let c2_over = tape.mul_scalar(c2_sum, inv_noise);
    let fit2 = tape.mul_scalar(c2_over, inv_noise);
    let fit_term = tape.sub(fit1, fit2);

    let sld = tape.sum_ln_diag(lb);
    let logdet_b = tape.scale(sld, 2.0);
    let n_log_noise = tape.scale(ids.log_noise, n as f64);

    // Trace correction: (sum_i kappa(z_i, z_i) - sum A^2) / s2, with the
    // prior diagonal equal to (Z .* Z) sig^2 because distances vanish.
    let two_log_sig = tape.scale(ids.log_sig, 2.0);
    let sig2 = tape.exp(two_log_sig);
    let z2 = tape.hadamard(z, z);
    let knn_col = tape.matmul(z2, sig2);
    let knn_sum = tape.sum_all(knn_col);
    let a2 = tape.hadamard(a, a);
    let a2_sum = tape.sum_all(a2);
    let tr_inner = tape.sub(knn_sum, a2_sum);
    let trace = tape.mul_scalar(tr_inner, inv_noise);

    let norm = tape.constant_scalar(n as f64 * (2.0 * std::f64::consts::PI).ln());
    let s1 = tape.add(fit_term, logdet_b);
    let s2 = tape.add(s1, n_log_noise);
    let s3 = tape.add(s2, trace);
    let s4 = tape.add(s3, norm);
    let objective = tape.scale(s4, 0.5);
    tape.mark_output(objective)?;
    Ok(tape)
}

/// Exact negative log marginal likelihood of `train` under `hp`, with targets
/// taken as-is (no standardization).
pub fn exact_nlml(train: &GpTrainingSet, hp: &GpHyperparams) -> Result<f64, GpError> {
    train.validate()?;
    hp.validate()?;
    let tape = build_exact_tape(&train.features, &train.time_indices, &train.targets, hp)?;
    Ok(tape.output_value())
}

/// Negated collapsed variational bound for the given inducing configuration,
/// with targets taken as-is. Always at least [`exact_nlml`] up to Cholesky
/// jitter.
pub fn sparse_bound_objective(
    train: &GpTrainingSet,
    hp: &GpHyperparams,
    inducing_p: &Mat,
    anchor_times: &[usize],
) -> Result<f64, GpError> {
    train.validate()?;
    hp.validate()?;
    if inducing_p.rows() != anchor_times.len() || inducing_p.cols() != train.features.cols() {
        return Err(GpError::InvalidConfig {
            detail: "inducing positions and anchor times are inconsistent".into(),
        });
    }
    let tape = build_sparse_tape(
        &train.features,
        &train.time_indices,
        &train.targets,
        hp,
        inducing_p,
        anchor_times,
    )?;
    Ok(tape.output_value())
}

/// k-means++ seeding over feature rows: the first index is uniform, each
/// subsequent one is drawn with probability proportional to its squared
/// distance from the chosen set. `count >= rows` returns every index in
/// order, which is what makes a full inducing set coincide with the exact
/// model.
pub fn kmeans_pp_indices(features: &Mat, count: usize, seed: u64) -> Vec<usize> {
    let n = features.rows();
    if count >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4B4D_4541_4E53);
    let d2 = |i: usize, j: usize| -> f64 {
        features
            .row(i)
            .iter()
            .zip(features.row(j))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum()
    };
    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    let mut best: Vec<f64> = (0..n).map(|i| d2(i, first)).collect();
    while chosen.len() < count {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // All remaining points duplicate the chosen set; take the first
            // index not yet chosen.
            (0..n).find(|i| !chosen.contains(i)).expect("count < n leaves an unchosen index")
        };
        chosen.push(next);
        for i in 0..n {
            let d = d2(i, next);
            if d < best[i] {
                best[i] = d;
            }
        }
    }
    chosen
}

/// Median pairwise distance over (a subsample of) the feature rows; the
/// length-scale initialization heuristic.
fn median_pairwise_distance(features: &Mat, seed: u64) -> f64 {
    let n = features.rows();
    let cap = 200.min(n);
    let mut indices: Vec<usize> = (0..n).collect();
    if n > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4D45_4449_414E);
        for i in 0..cap {
            let j = rng.random_range(i..n);
            indices.swap(i, j);
        }
        indices.truncate(cap);
    }
    let mut dists = Vec::with_capacity(cap * (cap - 1) / 2);
    for (k, &i) in indices.iter().enumerate() {
        for &j in &indices[k + 1..] {
            let d2: f64 = features
                .row(i)
                .iter()
                .zip(features.row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            if d2 > 0.0 {
                dists.push(d2.sqrt());
            }
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2]
}

/// Fit the GP head: standardize targets, initialize hyperparameters, minimize
/// the chosen objective with Adam, and assemble the predictive posterior.
pub fn fit(train: &GpTrainingSet, config: &GpFitConfig) -> Result<GpModel, GpError> {
    train.validate()?;
    config.validate(train.len())?;

    let scaler = TargetScaler::fit(&train.targets);
    let y_std: Vec<f64> = train.targets.iter().map(|&y| scaler.apply(y)).collect();
    let length_scale = median_pairwise_distance(&train.features, config.seed);
    let hp0 = GpHyperparams::init(
        train.features.cols(),
        train.table_size,
        config.components,
        length_scale,
        config.seed,
    );

    let (mut tape, anchor_times) = match config.mode {
        GpMode::Exact => (
            build_exact_tape(&train.features, &train.time_indices, &y_std, &hp0)?,
            Vec::new(),
        ),
        GpMode::Sparse { inducing } => {
            let anchors = kmeans_pp_indices(&train.features, inducing, config.seed);
            let p0 = train.features.gather_rows(&anchors);
            let anchor_times: Vec<usize> =
                anchors.iter().map(|&i| train.time_indices[i]).collect();
            let tape = build_sparse_tape(
                &train.features,
                &train.time_indices,
                &y_std,
                &hp0,
                &p0,
                &anchor_times,
            )?;
            (tape, anchor_times)
        }
    };

    let mut adam = Adam::new(config.learning_rate, config.clip_norm);
    let mut history = Vec::with_capacity(config.iterations + 1);
    for iteration in 0..config.iterations {
        let objective = tape.output_value();
        if !objective.is_finite() {
            return Err(GpError::Divergence { iteration });
        }
        history.push(objective);
        tape.backward()?;
        adam.step(&mut tape).map_err(|e| match e {
            NumericsError::NonFinite { .. } => GpError::Divergence { iteration },
            other => GpError::Numerical(other),
        })?;
        tape.forward()?;
    }
    let final_objective = tape.output_value();
    if !final_objective.is_finite() {
        return Err(GpError::Divergence { iteration: config.iterations });
    }
    history.push(final_objective);

    let hp = extract_hyperparams(&tape)?;
    let posterior = match config.mode {
        GpMode::Exact => {
            build_exact_posterior(&hp, &train.features, &train.time_indices, &y_std)?
        }
        GpMode::Sparse { .. } => {
            let inducing_p = tape.param_value(P_INDUCING)?.clone();
            build_sparse_posterior(
                &hp,
                &train.features,
                &train.time_indices,
                &y_std,
                inducing_p,
                anchor_times,
            )?
        }
    };

    Ok(GpModel {
        hyperparams: hp,
        season_days: train.season_days,
        mode: config.mode,
        y_mean: scaler.mean,
        y_std: scaler.std,
        objective_history: history,
        posterior,
    })
}
