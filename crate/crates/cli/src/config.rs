use std::path::Path;

use evfi::net::ModelConfig;
use evfi::pipeline::{EvalConfig, TrainConfig};
use evfi::sim::{ExposureMode, Pattern, ReferenceInit};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Scene and sensor settings for `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub pattern: Pattern,
    pub height: usize,
    pub width: usize,
    /// Pixels per latent frame, `[vx, vy]`.
    pub velocity: [f64; 2],
    pub contrast: f64,
    pub threshold_jitter: f64,
    pub reference_init: ReferenceInit,
    pub exposure: ExposureMode,
    pub seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            pattern: Pattern::Blobs,
            height: 64,
            width: 64,
            velocity: [1.0, 0.5],
            contrast: 0.2,
            threshold_jitter: 0.0,
            reference_init: ReferenceInit::FirstFrame,
            exposure: ExposureMode::RandEx,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses a JSON document; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(format!("field `{path}`: {}", e.into_inner()))
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        let s = &self.sim;
        if s.height == 0 || s.width == 0 {
            return Err(CliError::config("field `sim.height`/`sim.width`: must be positive"));
        }
        if !(s.contrast > 0.0) {
            return Err(CliError::config(format!("field `sim.contrast`: must be positive, got {}", s.contrast)));
        }
        if !(s.threshold_jitter >= 0.0) {
            return Err(CliError::config("field `sim.threshold_jitter`: must be non-negative"));
        }
        if !s.velocity.iter().all(|v| v.is_finite()) {
            return Err(CliError::config("field `sim.velocity`: must be finite"));
        }
        if let ExposureMode::Symmetric(m) = s.exposure {
            if m == 0 || m >= self.model.shutter_frames {
                return Err(CliError::config(format!(
                    "field `sim.exposure`: m={m} outside [1, {}]",
                    self.model.shutter_frames - 1
                )));
            }
        }
        self.train.validate(&self.model)?;
        let e = &self.eval;
        if e.samples == 0 || e.variants.is_empty() {
            return Err(CliError::config("field `eval.samples`/`eval.variants`: must be non-empty"));
        }
        self.model.check_dims(e.size, e.size)?;
        e.scene.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
