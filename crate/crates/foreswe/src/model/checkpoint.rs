//! Encoder checkpointing: the full parameter set, configuration, and frozen
//! scaling constants as one tagged JSON document.

use std::fs;
use std::path::Path;

use super::{EncoderParams, ModelError};

/// Format tag of encoder checkpoints.
pub const ENCODER_CHECKPOINT_FORMAT: &str = "foreswe-ckpt-v1";

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointFile {
    format: String,
    params: EncoderParams,
}

/// Write the encoder to `path` as pretty-printed JSON. The serialization
/// round-trips `f64` values exactly, so a reload reproduces bitwise
/// identical encodings.
pub fn save_encoder_checkpoint(path: &Path, params: &EncoderParams) -> Result<(), ModelError> {
    params.validate()?;
    let file = CheckpointFile {
        format: ENCODER_CHECKPOINT_FORMAT.to_string(),
        params: params.clone(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| ModelError::Checkpoint { detail: e.to_string() })?;
    fs::write(path, json)?;
    Ok(())
}

/// Read an encoder checkpoint, rejecting unknown format tags and any
/// parameter set whose shapes disagree with its own configuration.
pub fn load_encoder_checkpoint(path: &Path) -> Result<EncoderParams, ModelError> {
    let text = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| ModelError::Checkpoint { detail: format!("unparseable: {e}") })?;
    if file.format != ENCODER_CHECKPOINT_FORMAT {
        return Err(ModelError::Checkpoint {
            detail: format!(
                "unknown format tag {:?}, expected {ENCODER_CHECKPOINT_FORMAT:?}",
                file.format
            ),
        });
    }
    file.params.validate()?;
    Ok(file.params)
}

#[cfg(test)]
mod tests {
    use super::super::{EncoderConfig, EncoderScalings};
    use super::*;
    use crate::data::{ForecastMode, Resolution, WindowSpec};
    use crate::Mat;

    fn sample_params() -> EncoderParams {
        let config = EncoderConfig {
            d_model: 8,
            windows: vec![
                WindowSpec { resolution: Resolution::Daily, k: 5 },
                WindowSpec { resolution: Resolution::Weekly, k: 3 },
            ],
            d_gp: 4,
            horizon: 3,
            forecast_mode: ForecastMode::Daily,
            inner_softmax: true,
            seed: 99,
        };
        let mut params = EncoderParams::init(
            config,
            EncoderScalings::identity(),
            vec!["basin-a".to_string(), "basin-b".to_string()],
        )
        .unwrap();
        // Perturb away from the clean init so the round trip carries
        // irrational intermediate values.
        params.w_dist = Mat::scalar(-0.7331);
        params.w_angle = Mat::scalar(0.2377);
        for v in params.loc_w.data_mut() {
            *v = (*v * 1.7).sin();
        }
        params
    }

    #[test]
    fn save_and_load_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("encoder.json");
        let params = sample_params();
        save_encoder_checkpoint(&path, &params).unwrap();
        let loaded = load_encoder_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("encoder.json");
        save_encoder_checkpoint(&path, &sample_params()).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("foreswe-ckpt-v1", "foreswe-ckpt-v0");
        std::fs::write(&path, text).unwrap();
        let err = load_encoder_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("format tag"), "{err}");
    }

    #[test]
    fn corrupt_and_misshapen_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("encoder.json");
        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(
            load_encoder_checkpoint(&path),
            Err(ModelError::Checkpoint { .. })
        ));

        let mut params = sample_params();
        params.head_w = Mat::zeros(2, 2); // disagrees with d_gp x horizon
        assert!(save_encoder_checkpoint(&path, &params).is_err());
    }
}
