//! Encoder parameters and the plain-matrix forward path: location embedding,
//! temporal attribute aggregation, spatial attention, and day encoding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    spatial_features, EncoderConfig, EncoderScalings, LatentRepresentation, ModelError,
    SPATIAL_FEATURES,
};
use crate::data::{Dataset, StationMeta, WindowedExample, NUM_ATTRIBUTES};
use crate::geo::GeoBiasMatrices;
use crate::numerics::{softmax_rows, splitmix64};
use crate::Mat;

/// All encoder weights plus the frozen data-derived constants. Weight
/// matrices are stored input-major: a layer mapping `a -> b` is an `a x b`
/// matrix applied as `row * W`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub scalings: EncoderScalings,
    /// Spatial-feature embedding, `SPATIAL_FEATURES x d_model` plus bias.
    pub loc_w: Mat,
    pub loc_b: Mat,
    /// Frozen per-key prompt vectors (length `d_model` each). Keys seen at
    /// initialization are cached; unseen keys derive the same way on demand.
    pub prompt_table: BTreeMap<String, Vec<f64>>,
    /// Per-window, per-attribute history embeddings, `k_c x d_model` plus
    /// `1 x d_model` biases.
    pub attr_w: Vec<Vec<Mat>>,
    pub attr_b: Vec<Vec<Mat>>,
    /// Per-window temporal attention projections, `d_model x d_model`.
    pub temporal_q: Vec<Mat>,
    pub temporal_k: Vec<Mat>,
    pub temporal_v: Vec<Mat>,
    /// Spatial attention projections, `concat_dim x concat_dim`.
    pub spatial_q: Mat,
    pub spatial_k: Mat,
    pub spatial_v: Mat,
    /// Geodesic bias weights (scalars kept as 1x1 for the tape).
    pub w_dist: Mat,
    pub w_angle: Mat,
    /// Reduction to the GP representation, `concat_dim x d_gp` (no bias).
    pub reduction: Mat,
    /// Pretraining head, `d_gp x horizon` plus bias.
    pub head_w: Mat,
    pub head_b: Mat,
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let s = 1.0 / (fan_in as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-s..s))
}

/// Deterministic frozen prompt vector for a key: an FNV-1a hash of the key
/// mixed with the seed selects an RNG stream, entries uniform in
/// `(-1/sqrt(d_model), 1/sqrt(d_model))`.
pub fn prompt_vector(seed: u64, key: &str, d_model: usize) -> Vec<f64> {
    let hash = key
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |acc, b| (acc ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3));
    let mut rng =
        ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ 0x5052_4F4D_5054) ^ hash));
    let s = 1.0 / (d_model as f64).sqrt();
    (0..d_model).map(|_| rng.random_range(-s..s)).collect()
}

impl EncoderParams {
    /// Seeded initialization: every weight matrix uniform in
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero, and the geodesic
    /// bias weights start at zero so the bias terms learn a correction from
    /// the vanilla attention path. The draw order is fixed, so equal seeds
    /// give bitwise-equal parameters.
    pub fn init(
        config: EncoderConfig,
        scalings: EncoderScalings,
        prompt_keys: impl IntoIterator<Item = String>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if scalings.spatial.dim() != SPATIAL_FEATURES
            || scalings.attributes.dim() != NUM_ATTRIBUTES
            || scalings.targets.dim() != 1
        {
            return Err(ModelError::InvalidConfig {
                detail: "scaling dimensions disagree with the feature layout".into(),
            });
        }
        let d = config.d_model;
        let cdim = config.concat_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0x454E_434F_4445));

        let loc_w = uniform_init(&mut rng, SPATIAL_FEATURES, d, SPATIAL_FEATURES);
        let mut attr_w = Vec::with_capacity(config.windows.len());
        let mut attr_b = Vec::with_capacity(config.windows.len());
        let mut temporal_q = Vec::with_capacity(config.windows.len());
        let mut temporal_k = Vec::with_capacity(config.windows.len());
        let mut temporal_v = Vec::with_capacity(config.windows.len());
        for window in &config.windows {
            let k = window.k;
            attr_w.push((0..NUM_ATTRIBUTES).map(|_| uniform_init(&mut rng, k, d, k)).collect());
            attr_b.push(vec![Mat::zeros(1, d); NUM_ATTRIBUTES]);
            temporal_q.push(uniform_init(&mut rng, d, d, d));
            temporal_k.push(uniform_init(&mut rng, d, d, d));
            temporal_v.push(uniform_init(&mut rng, d, d, d));
        }
        let spatial_q = uniform_init(&mut rng, cdim, cdim, cdim);
        let spatial_k = uniform_init(&mut rng, cdim, cdim, cdim);
        let spatial_v = uniform_init(&mut rng, cdim, cdim, cdim);
        let reduction = uniform_init(&mut rng, cdim, config.d_gp, cdim);
        let head_w = uniform_init(&mut rng, config.d_gp, config.horizon, config.d_gp);

        let prompt_table = prompt_keys
            .into_iter()
            .map(|key| {
                let vec = prompt_vector(config.seed, &key, d);
                (key, vec)
            })
            .collect();

        Ok(EncoderParams {
            loc_b: Mat::zeros(1, d),
            head_b: Mat::zeros(1, config.horizon),
            w_dist: Mat::scalar(0.0),
            w_angle: Mat::scalar(0.0),
            prompt_table,
            scalings,
            loc_w,
            attr_w,
            attr_b,
            temporal_q,
            temporal_k,
            temporal_v,
            spatial_q,
            spatial_k,
            spatial_v,
            reduction,
            head_w,
            config,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Geodesic distance bias weight `w_H`.
    pub fn w_dist(&self) -> f64 {
        self.w_dist.as_scalar()
    }

    /// Geodesic angularity bias weight `w_theta`.
    pub fn w_angle(&self) -> f64 {
        self.w_angle.as_scalar()
    }

    /// The frozen prompt vector for a key: cached if seen at init, derived
    /// identically otherwise.
    pub fn prompt_for(&self, key: &str) -> Vec<f64> {
        self.prompt_table
            .get(key)
            .cloned()
            .unwrap_or_else(|| prompt_vector(self.config.seed, key, self.config.d_model))
    }

    /// Ordered `(name, matrix)` view of every trainable tensor. The names
    /// double as gradient-tape parameter names; prompt vectors and scalings
    /// are frozen and deliberately absent.
    pub(crate) fn trainable(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("enc.loc.w".into(), &self.loc_w),
            ("enc.loc.b".into(), &self.loc_b),
        ];
        for (c, ((ws, bs), ((tq, tk), tv))) in self
            .attr_w
            .iter()
            .zip(&self.attr_b)
            .zip(self.temporal_q.iter().zip(&self.temporal_k).zip(&self.temporal_v))
            .enumerate()
        {
            for (a, w) in ws.iter().enumerate() {
                out.push((format!("enc.win{c}.attr{a:02}.w"), w));
            }
            for (a, b) in bs.iter().enumerate() {
                out.push((format!("enc.win{c}.attr{a:02}.b"), b));
            }
            out.push((format!("enc.win{c}.q"), tq));
            out.push((format!("enc.win{c}.k"), tk));
            out.push((format!("enc.win{c}.v"), tv));
        }
        out.push(("enc.sp.q".into(), &self.spatial_q));
        out.push(("enc.sp.k".into(), &self.spatial_k));
        out.push(("enc.sp.v".into(), &self.spatial_v));
        out.push(("enc.sp.w_dist".into(), &self.w_dist));
        out.push(("enc.sp.w_angle".into(), &self.w_angle));
        out.push(("enc.reduce".into(), &self.reduction));
        out.push(("enc.head.w".into(), &self.head_w));
        out.push(("enc.head.b".into(), &self.head_b));
        out
    }

    /// Mutable counterpart of [`EncoderParams::trainable`], same order.
    pub(crate) fn trainable_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![
            ("enc.loc.w".into(), &mut self.loc_w),
            ("enc.loc.b".into(), &mut self.loc_b),
        ];
        for (c, ((ws, bs), ((tq, tk), tv))) in self
            .attr_w
            .iter_mut()
            .zip(&mut self.attr_b)
            .zip(self.temporal_q.iter_mut().zip(&mut self.temporal_k).zip(&mut self.temporal_v))
            .enumerate()
        {
            for (a, w) in ws.iter_mut().enumerate() {
                out.push((format!("enc.win{c}.attr{a:02}.w"), w));
            }
            for (a, b) in bs.iter_mut().enumerate() {
                out.push((format!("enc.win{c}.attr{a:02}.b"), b));
            }
            out.push((format!("enc.win{c}.q"), tq));
            out.push((format!("enc.win{c}.k"), tk));
            out.push((format!("enc.win{c}.v"), tv));
        }
        out.push(("enc.sp.q".into(), &mut self.spatial_q));
        out.push(("enc.sp.k".into(), &mut self.spatial_k));
        out.push(("enc.sp.v".into(), &mut self.spatial_v));
        out.push(("enc.sp.w_dist".into(), &mut self.w_dist));
        out.push(("enc.sp.w_angle".into(), &mut self.w_angle));
        out.push(("enc.reduce".into(), &mut self.reduction));
        out.push(("enc.head.w".into(), &mut self.head_w));
        out.push(("enc.head.b".into(), &mut self.head_b));
        out
    }

    /// Shape consistency for values that bypassed [`EncoderParams::init`]
    /// (checkpoint loads).
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let d = self.config.d_model;
        let cdim = self.config.concat_dim();
        let c = self.config.window_count();
        let mut ok = self.loc_w.shape() == (SPATIAL_FEATURES, d)
            && self.loc_b.shape() == (1, d)
            && self.attr_w.len() == c
            && self.attr_b.len() == c
            && self.temporal_q.len() == c
            && self.temporal_k.len() == c
            && self.temporal_v.len() == c
            && self.spatial_q.shape() == (cdim, cdim)
            && self.spatial_k.shape() == (cdim, cdim)
            && self.spatial_v.shape() == (cdim, cdim)
            && self.w_dist.shape() == (1, 1)
            && self.w_angle.shape() == (1, 1)
            && self.reduction.shape() == (cdim, self.config.d_gp)
            && self.head_w.shape() == (self.config.d_gp, self.config.horizon)
            && self.head_b.shape() == (1, self.config.horizon)
            && self.scalings.spatial.dim() == SPATIAL_FEATURES
            && self.scalings.attributes.dim() == NUM_ATTRIBUTES
            && self.scalings.targets.dim() == 1;
        for (wc, window) in self.attr_w.iter().zip(&self.config.windows) {
            ok &= wc.len() == NUM_ATTRIBUTES
                && wc.iter().all(|w| w.shape() == (window.k, d));
        }
        for bc in &self.attr_b {
            ok &= bc.len() == NUM_ATTRIBUTES && bc.iter().all(|b| b.shape() == (1, d));
        }
        ok &= self
            .temporal_q
            .iter()
            .chain(&self.temporal_k)
            .chain(&self.temporal_v)
            .all(|m| m.shape() == (d, d));
        ok &= self.prompt_table.values().all(|v| v.len() == d);
        if !ok {
            return Err(ModelError::Checkpoint {
                detail: "parameter shapes disagree with the configuration".into(),
            });
        }
        let finite = self.trainable().iter().all(|(_, m)| m.all_finite())
            && self.prompt_table.values().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(ModelError::Checkpoint { detail: "non-finite parameter values".into() });
        }
        Ok(())
    }

    /// Location embedding `L_t`: standardized spatial features through the
    /// affine embedding, plus the frozen prompt vector.
    pub fn embed_location(&self, meta: &StationMeta, t: usize) -> Vec<f64> {
        let raw = spatial_features(meta, t);
        let prompt = self.prompt_for(&meta.prompt_key);
        let d = self.config.d_model;
        let mut out = vec![0.0; d];
        for (j, (slot, prompt_j)) in out.iter_mut().zip(&prompt).enumerate() {
            let mut acc = self.loc_b[(0, j)];
            for (i, &value) in raw.iter().enumerate() {
                acc += self.scalings.spatial.standardize(i, value) * self.loc_w[(i, j)];
            }
            *slot = acc + prompt_j;
        }
        out
    }

    /// Single-query temporal attention over one window's attribute
    /// histories. `histories` holds one raw `k`-history per row; row `a` is
    /// standardized and embedded with attribute `a`'s layer, then the query
    /// (the location embedding) attends over the embedded rows. Passing
    /// fewer than [`NUM_ATTRIBUTES`] rows uses the leading layers, which
    /// keeps the small worked examples expressible.
    pub fn aggregate_attributes(
        &self,
        query: &[f64],
        histories: &Mat,
        window: usize,
    ) -> Result<Vec<f64>, ModelError> {
        let d = self.config.d_model;
        if window >= self.config.window_count() {
            return Err(ModelError::ShapeMismatch {
                detail: format!("window {window} outside 0..{}", self.config.window_count()),
            });
        }
        let k = self.config.windows[window].k;
        let f_used = histories.rows();
        if query.len() != d || histories.cols() != k || f_used == 0 || f_used > NUM_ATTRIBUTES {
            return Err(ModelError::ShapeMismatch {
                detail: format!(
                    "window {window} expects a {d}-vector query and up to {NUM_ATTRIBUTES} x {k} histories, got query {} and {} x {}",
                    query.len(),
                    f_used,
                    histories.cols()
                ),
            });
        }

        let mut dbar = Mat::zeros(f_used, d);
        for a in 0..f_used {
            let w = &self.attr_w[window][a];
            let b = &self.attr_b[window][a];
            for j in 0..d {
                let mut acc = b[(0, j)];
                for kk in 0..k {
                    acc += self.scalings.attributes.standardize(a, histories[(a, kk)])
                        * w[(kk, j)];
                }
                dbar[(a, j)] = acc;
            }
        }

        let q = Mat::row_vec(query).matmul(&self.temporal_q[window]);
        let keys = dbar.matmul(&self.temporal_k[window]);
        let values = dbar.matmul(&self.temporal_v[window]);
        let mut scores = q.matmul_nt(&keys);
        let scale = 1.0 / (d as f64).sqrt();
        for v in scores.data_mut() {
            *v *= scale;
        }
        let weights = softmax_rows(&scores);
        Ok(weights.matmul(&values).data().to_vec())
    }

    /// Outer pre-softmax attention logits of the spatial stage:
    /// `inner(QK'/sqrt(d_model)) + w_H * d_H + w_theta * theta`, where
    /// `inner` is a row softmax when `inner_softmax` is set and the identity
    /// otherwise.
    pub(crate) fn spatial_logits(
        &self,
        x: &Mat,
        bias: &GeoBiasMatrices,
    ) -> Result<Mat, ModelError> {
        let n = x.rows();
        if x.cols() != self.config.concat_dim() {
            return Err(ModelError::ShapeMismatch {
                detail: format!(
                    "spatial input width {} is not C*d_model = {}",
                    x.cols(),
                    self.config.concat_dim()
                ),
            });
        }
        if bias.len() != n {
            return Err(ModelError::ShapeMismatch {
                detail: format!("bias matrices cover {} stations, batch has {n}", bias.len()),
            });
        }
        let q = x.matmul(&self.spatial_q);
        let k = x.matmul(&self.spatial_k);
        let mut scores = q.matmul_nt(&k);
        let scale = 1.0 / (self.config.d_model as f64).sqrt();
        for v in scores.data_mut() {
            *v *= scale;
        }
        let inner = if self.config.inner_softmax { softmax_rows(&scores) } else { scores };
        let (w_h, w_t) = (self.w_dist(), self.w_angle());
        Ok(Mat::from_fn(n, n, |i, j| {
            inner[(i, j)] + w_h * bias.distance[(i, j)] + w_t * bias.angularity[(i, j)]
        }))
    }

    /// Geodesically biased spatial attention over concatenated location
    /// rows: value-mixes the batch with the doubly softmaxed weights.
    pub fn spatial_attention(&self, x: &Mat, bias: &GeoBiasMatrices) -> Result<Mat, ModelError> {
        let logits = self.spatial_logits(x, bias)?;
        let weights = softmax_rows(&logits);
        let v = x.matmul(&self.spatial_v);
        Ok(weights.matmul(&v))
    }
}

/// Encode one day's batch: location embeddings, per-window temporal
/// aggregation, window concatenation, spatial attention, and reduction to
/// `d_gp`. All examples must share one anchor `(year, day)`; `bias_all`
/// covers the full dataset station ordering and is subset to the batch.
pub fn encode_day(
    dataset: &Dataset,
    examples: &[WindowedExample],
    bias_all: &GeoBiasMatrices,
    params: &EncoderParams,
) -> Result<Vec<LatentRepresentation>, ModelError> {
    let first = examples.first().ok_or(ModelError::EmptyBatch)?;
    let (t, year) = (first.t, first.year_index);
    if let Some(bad) =
        examples.iter().find(|e| e.t != t || e.year_index != year)
    {
        return Err(ModelError::MixedAnchorDays {
            detail: format!(
                "expected (year {year}, day {t}), found (year {}, day {})",
                bad.year_index, bad.t
            ),
        });
    }
    if bias_all.len() != dataset.stations().len() {
        return Err(ModelError::ShapeMismatch {
            detail: format!(
                "bias covers {} stations, dataset has {}",
                bias_all.len(),
                dataset.stations().len()
            ),
        });
    }
    let c = params.config.window_count();
    let d = params.config.d_model;
    let n = examples.len();

    let mut x = Mat::zeros(n, params.config.concat_dim());
    let mut station_indices = Vec::with_capacity(n);
    for (i, example) in examples.iter().enumerate() {
        if example.histories.len() != c {
            return Err(ModelError::ShapeMismatch {
                detail: format!(
                    "example carries {} windows, config has {c}",
                    example.histories.len()
                ),
            });
        }
        let meta = &dataset.stations()[example.station_index];
        let query = params.embed_location(meta, t);
        for (w, histories) in example.histories.iter().enumerate() {
            let mixed = params.aggregate_attributes(&query, histories, w)?;
            for (j, value) in mixed.iter().enumerate() {
                x[(i, w * d + j)] = *value;
            }
        }
        station_indices.push(example.station_index);
    }

    let bias = bias_all.subset(&station_indices);
    let attended = params.spatial_attention(&x, &bias)?;
    let reduced = attended.matmul(&params.reduction);
    if !reduced.all_finite() {
        return Err(ModelError::NonFinite { context: "reduced representation".into() });
    }
    Ok(station_indices
        .into_iter()
        .enumerate()
        .map(|(i, location_index)| LatentRepresentation {
            r: reduced.row(i).to_vec(),
            t,
            location_index,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::EncoderScalings;
    use super::*;
    use crate::data::{
        generate_synthetic, build_windows, ForecastMode, Resolution, SyntheticConfig, WindowSpec,
    };
    use crate::geo::pairwise_geo;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            windows: vec![
                WindowSpec { resolution: Resolution::Daily, k: 4 },
                WindowSpec { resolution: Resolution::Weekly, k: 3 },
            ],
            d_gp: 3,
            horizon: 2,
            forecast_mode: ForecastMode::Daily,
            inner_softmax: true,
            seed: 11,
        }
    }

    fn tiny_params() -> EncoderParams {
        EncoderParams::init(tiny_config(), EncoderScalings::identity(), Vec::new()).unwrap()
    }

    fn meta(id: &str, lat: f64, lon: f64, key: &str) -> StationMeta {
        StationMeta::new(id, lat, lon, 5000.0, 0.2, 1, key).unwrap()
    }

    #[test]
    fn initialization_is_seed_deterministic() {
        let a = tiny_params();
        let b = tiny_params();
        assert_eq!(a, b);
        let mut other_cfg = tiny_config();
        other_cfg.seed = 12;
        let c = EncoderParams::init(other_cfg, EncoderScalings::identity(), Vec::new()).unwrap();
        assert_ne!(a.loc_w, c.loc_w);
        assert_eq!(a.w_dist(), 0.0);
        assert_eq!(a.w_angle(), 0.0);
        a.validate().unwrap();
    }

    #[test]
    fn zero_spatial_weights_leave_only_the_prompt_embedding() {
        let mut params = tiny_params();
        params.loc_w = Mat::zeros(SPATIAL_FEATURES, 8);
        params.loc_b = Mat::zeros(1, 8);
        let station = meta("a", 47.0, -120.0, "ridge-site");
        let embedded = params.embed_location(&station, 40);
        assert_eq!(embedded, params.prompt_for("ridge-site"));
    }

    #[test]
    fn shared_prompt_keys_share_the_prompt_component() {
        let params = tiny_params();
        let a = meta("a", 47.0, -120.0, "shared-key");
        let b = meta("b", 44.0, -110.0, "shared-key");
        // Subtracting the spatial part isolates the prompt: zero-weight copy.
        let mut bare = params.clone();
        bare.loc_w = Mat::zeros(SPATIAL_FEATURES, 8);
        bare.loc_b = Mat::zeros(1, 8);
        assert_eq!(bare.embed_location(&a, 3), bare.embed_location(&b, 99));
        // And the cached table agrees with on-demand derivation.
        let table = EncoderParams::init(
            tiny_config(),
            EncoderScalings::identity(),
            vec!["shared-key".to_string()],
        )
        .unwrap();
        assert_eq!(table.prompt_for("shared-key"), params.prompt_for("shared-key"));
    }

    #[test]
    fn single_attribute_attention_returns_its_value_projection() {
        let params = tiny_params();
        let hist = Mat::from_fn(1, 4, |_, j| 0.3 * j as f64 - 0.2);
        let out_a = params.aggregate_attributes(&vec![0.5; 8], &hist, 0).unwrap();
        let out_b = params.aggregate_attributes(&vec![-2.0; 8], &hist, 0).unwrap();
        assert_eq!(out_a, out_b, "softmax over one attribute cannot depend on the query");

        // Straight-line expected value: embed then project by V.
        let mut embedded = vec![0.0; 8];
        for (j, slot) in embedded.iter_mut().enumerate() {
            let mut acc = params.attr_b[0][0][(0, j)];
            for kk in 0..4 {
                acc += hist[(0, kk)] * params.attr_w[0][0][(kk, j)];
            }
            *slot = acc;
        }
        for j in 0..8 {
            let expected: f64 =
                (0..8).map(|i| embedded[i] * params.temporal_v[0][(i, j)]).sum();
            assert!((out_a[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_embedded_rows_collapse_to_the_common_projection() {
        let mut params = tiny_params();
        // Same embedding layer for the first three attributes makes equal
        // raw rows embed identically.
        params.attr_w[0][1] = params.attr_w[0][0].clone();
        params.attr_w[0][2] = params.attr_w[0][0].clone();
        let row: Vec<f64> = (0..4).map(|j| 0.7 - 0.1 * j as f64).collect();
        let hist = Mat::from_rows(&[row.clone(), row.clone(), row]);
        let got = params.aggregate_attributes(&vec![0.25; 8], &hist, 0).unwrap();
        let single = params
            .aggregate_attributes(&vec![0.25; 8], &Mat::from_rows(&[hist.row(0).to_vec()]), 0)
            .unwrap();
        for (g, s) in got.iter().zip(&single) {
            assert!((g - s).abs() < 1e-12, "convex mix of equal rows must be that row");
        }
    }

    #[test]
    fn three_attribute_case_matches_a_dense_oracle() {
        let params = tiny_params();
        let d = 8;
        let query: Vec<f64> = (0..d).map(|j| (j as f64 * 0.31).sin()).collect();
        let hist = Mat::from_fn(3, 4, |a, j| ((a * 4 + j) as f64 * 0.47).cos());
        let got = params.aggregate_attributes(&query, &hist, 0).unwrap();

        // Independent dense evaluation with explicit loops.
        let mut dbar = vec![vec![0.0; d]; 3];
        for a in 0..3 {
            for j in 0..d {
                let mut acc = params.attr_b[0][a][(0, j)];
                for kk in 0..4 {
                    acc += hist[(a, kk)] * params.attr_w[0][a][(kk, j)];
                }
                dbar[a][j] = acc;
            }
        }
        let proj = |row: &[f64], w: &Mat| -> Vec<f64> {
            (0..d).map(|j| (0..d).map(|i| row[i] * w[(i, j)]).sum()).collect()
        };
        let q = proj(&query, &params.temporal_q[0]);
        let mut scores = [0.0; 3];
        for a in 0..3 {
            let key = proj(&dbar[a], &params.temporal_k[0]);
            scores[a] =
                q.iter().zip(&key).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt();
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut expected = vec![0.0; d];
        for a in 0..3 {
            let value = proj(&dbar[a], &params.temporal_v[0]);
            for j in 0..d {
                expected[j] += exps[a] / total * value[j];
            }
        }
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    fn toy_bias(n: usize, seed: u64) -> GeoBiasMatrices {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dist = Mat::zeros(n, n);
        let mut ang = Mat::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = rng.random_range(0.0..1.0);
                let a = rng.random_range(0.0..1.0);
                dist[(i, j)] = d;
                dist[(j, i)] = d;
                ang[(i, j)] = a;
                ang[(j, i)] = a;
            }
        }
        GeoBiasMatrices {
            distance: dist,
            angularity: ang,
            distance_range: (0.0, 1.0),
            angularity_range: (0.0, 1.0),
        }
    }

    #[test]
    fn single_row_spatial_attention_is_its_own_value() {
        let params = tiny_params();
        let x = Mat::from_fn(1, 16, |_, j| (j as f64 * 0.2).sin());
        let out = params.spatial_attention(&x, &toy_bias(1, 5)).unwrap();
        let value = x.matmul(&params.spatial_v);
        for j in 0..16 {
            assert!((out[(0, j)] - value[(0, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_bias_weights_ignore_the_geodesic_matrices() {
        let params = tiny_params();
        assert_eq!(params.w_dist(), 0.0);
        let x = Mat::from_fn(4, 16, |i, j| ((i * 16 + j) as f64 * 0.13).cos());
        let out_a = params.spatial_attention(&x, &toy_bias(4, 1)).unwrap();
        let out_b = params.spatial_attention(&x, &toy_bias(4, 2)).unwrap();
        assert_eq!(out_a.data(), out_b.data());
    }

    #[test]
    fn four_row_spatial_attention_matches_a_dense_oracle() {
        let mut params = tiny_params();
        params.w_dist = Mat::scalar(-0.8);
        params.w_angle = Mat::scalar(0.35);
        let n = 4;
        let cdim = 16;
        let x = Mat::from_fn(n, cdim, |i, j| ((i * cdim + j) as f64 * 0.219).sin());
        let bias = toy_bias(n, 9);
        let got = params.spatial_attention(&x, &bias).unwrap();

        // Dense re-evaluation with explicit loops, double softmax included.
        let mm = |a: &Mat, b: &Mat| -> Vec<Vec<f64>> {
            (0..a.rows())
                .map(|i| {
                    (0..b.cols())
                        .map(|j| (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
                        .collect()
                })
                .collect()
        };
        let q = mm(&x, &params.spatial_q);
        let k = mm(&x, &params.spatial_k);
        let v = mm(&x, &params.spatial_v);
        let softmax = |row: &[f64]| -> Vec<f64> {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        };
        let scale = 1.0 / (params.config.d_model as f64).sqrt();
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..cdim).map(|m| q[i][m] * k[j][m]).sum::<f64>() * scale)
                .collect();
            let inner = softmax(&scores);
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    inner[j] - 0.8 * bias.distance[(i, j)] + 0.35 * bias.angularity[(i, j)]
                })
                .collect();
            let outer = softmax(&logits);
            assert!((outer.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for m in 0..cdim {
                let expected: f64 = (0..n).map(|j| outer[j] * v[j][m]).sum();
                assert!(
                    (got[(i, m)] - expected).abs() < 1e-10,
                    "row {i} col {m}: {} vs {expected}",
                    got[(i, m)]
                );
            }
        }
    }

    #[test]
    fn negative_distance_weight_strictly_lowers_the_logit_of_a_farther_pair() {
        let mut params = tiny_params();
        params.w_dist = Mat::scalar(-1.2);
        let x = Mat::from_fn(3, 16, |i, j| ((i + j) as f64 * 0.17).sin());
        let near = toy_bias(3, 4);
        let mut far = near.clone();
        far.distance[(0, 1)] += 0.25;
        far.distance[(1, 0)] += 0.25;
        let logit_near = params.spatial_logits(&x, &near).unwrap();
        let logit_far = params.spatial_logits(&x, &far).unwrap();
        assert!(
            logit_far[(0, 1)] < logit_near[(0, 1)],
            "larger normalized distance must lower the pre-softmax logit"
        );
        // Unrelated pairs keep their logits bit-identical.
        assert_eq!(logit_far[(0, 2)], logit_near[(0, 2)]);
    }

    #[test]
    fn inner_softmax_switch_changes_the_weights() {
        let params_on = tiny_params();
        let mut cfg_off = tiny_config();
        cfg_off.inner_softmax = false;
        let params_off =
            EncoderParams::init(cfg_off, EncoderScalings::identity(), Vec::new()).unwrap();
        let x = Mat::from_fn(3, 16, |i, j| ((i * 7 + j) as f64 * 0.11).sin() * 2.0);
        let bias = toy_bias(3, 8);
        let on = params_on.spatial_attention(&x, &bias).unwrap();
        let off = params_off.spatial_attention(&x, &bias).unwrap();
        assert_ne!(on.data(), off.data());
    }

    fn synthetic_batch() -> (Dataset, Vec<WindowedExample>, GeoBiasMatrices) {
        let dataset = generate_synthetic(&SyntheticConfig {
            n_stations: 5,
            n_years: 2,
            start_year: 1991,
            seed: 3,
        });
        let config = tiny_config();
        let examples = build_windows(
            &dataset,
            &[1992],
            &config.windows,
            config.horizon,
            config.forecast_mode,
        )
        .unwrap();
        let day0: Vec<WindowedExample> = examples
            .iter()
            .filter(|e| e.t == 60)
            .cloned()
            .collect();
        let points: Vec<_> = dataset.stations().iter().map(|s| s.geo).collect();
        let bias = pairwise_geo(&points);
        (dataset, day0, bias)
    }

    #[test]
    fn encode_day_returns_one_reduced_vector_per_example() {
        let (dataset, batch, bias) = synthetic_batch();
        let params = tiny_params();
        assert_eq!(batch.len(), 5);
        let reps = encode_day(&dataset, &batch, &bias, &params).unwrap();
        assert_eq!(reps.len(), 5);
        for (rep, example) in reps.iter().zip(&batch) {
            assert_eq!(rep.r.len(), 3);
            assert_eq!(rep.t, 60);
            assert_eq!(rep.location_index, example.station_index);
            assert!(rep.r.iter().all(|v| v.is_finite()));
        }
        // Bit-identical on repetition.
        let again = encode_day(&dataset, &batch, &bias, &params).unwrap();
        assert_eq!(reps, again);
    }

    #[test]
    fn encode_day_is_permutation_equivariant() {
        let (dataset, batch, bias) = synthetic_batch();
        let params = tiny_params();
        let reps = encode_day(&dataset, &batch, &bias, &params).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let shuffled: Vec<WindowedExample> =
            perm.iter().map(|&i| batch[i].clone()).collect();
        let reps_shuffled = encode_day(&dataset, &shuffled, &bias, &params).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            assert_eq!(reps_shuffled[slot].t, reps[src].t);
            assert_eq!(reps_shuffled[slot].location_index, reps[src].location_index);
            // Re-ordered attention sums reassociate the floating-point
            // reductions, so equivariance holds to tight tolerance rather
            // than bitwise.
            for (a, b) in reps_shuffled[slot].r.iter().zip(&reps[src].r) {
                assert!((a - b).abs() < 1e-12, "permuted output must follow its example");
            }
        }
    }

    #[test]
    fn zero_reduction_matrix_zeroes_the_representations() {
        let (dataset, batch, bias) = synthetic_batch();
        let mut params = tiny_params();
        params.reduction = Mat::zeros(16, 3);
        let reps = encode_day(&dataset, &batch, &bias, &params).unwrap();
        assert!(reps.iter().all(|rep| rep.r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn mixed_day_batches_are_rejected() {
        let (dataset, mut batch, bias) = synthetic_batch();
        batch[1].t = 61;
        let params = tiny_params();
        assert!(matches!(
            encode_day(&dataset, &batch, &bias, &params),
            Err(ModelError::MixedAnchorDays { .. })
        ));
        assert!(matches!(
            encode_day(&dataset, &[], &bias, &params),
            Err(ModelError::EmptyBatch)
        ));
    }
}
