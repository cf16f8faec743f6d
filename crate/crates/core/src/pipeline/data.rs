use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::events::{EventStack, EventStream};
use crate::frame::Frame;
use crate::net::{shutter_stack, ModelConfig, ModelInput};
use crate::sim::{generate_events, make_scene, sample_exposure, synth_blur, ExposureMode, ExposureSpec, Pattern, SimConfig};
use crate::tensor::Scalar;

/// Random toy scenes: a pattern translating at a random speed and heading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub patterns: Vec<Pattern>,
    /// Speed range in pixels per latent frame.
    pub min_speed: f64,
    pub max_speed: f64,
    pub contrast: f64,
    pub threshold_jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            patterns: Pattern::ALL.to_vec(),
            min_speed: 0.5,
            max_speed: 1.5,
            contrast: 0.2,
            threshold_jitter: 0.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.patterns.is_empty() {
            return bad("scene.patterns must not be empty".into());
        }
        if !(self.min_speed >= 0.0 && self.max_speed >= self.min_speed && self.max_speed.is_finite()) {
            return bad(format!(
                "scene speed range [{}, {}] is invalid",
                self.min_speed, self.max_speed
            ));
        }
        if !(self.contrast > 0.0) {
            return bad(format!("scene.contrast must be positive, got {}", self.contrast));
        }
        if !(self.threshold_jitter >= 0.0) {
            return bad(format!("scene.threshold_jitter must be non-negative, got {}", self.threshold_jitter));
        }
        Ok(())
    }
}

/// One shutter period of a random scene with all its latent frames.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub i0: Frame,
    pub i1: Frame,
    pub stream: EventStream,
    pub spec: ExposureSpec,
    /// `E_N` over the whole shutter period.
    pub e_n: EventStack,
    /// Latent frame `i` sits at `spec.latent_time(i)`.
    pub latents: Vec<Frame>,
}

impl EvalSample {
    pub fn input<T: Scalar>(&self, cfg: &ModelConfig, tau: f64) -> Result<ModelInput<T>, PipelineError> {
        Ok(ModelInput::from_events(cfg, &self.i0, &self.i1, &self.stream, &self.spec, tau)?)
    }
}

/// A training example: inputs plus one target time and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub i0: Frame,
    pub i1: Frame,
    pub stream: EventStream,
    pub spec: ExposureSpec,
    pub e_n: EventStack,
    pub tau_index: usize,
    pub tau: f64,
    pub gt: Frame,
}

impl TrainingSample {
    pub fn input<T: Scalar>(&self, cfg: &ModelConfig) -> Result<ModelInput<T>, PipelineError> {
        let e_tau = crate::events::tau_centered_stack(&self.stream, self.tau, cfg.tau_half_width, cfg.tau_bins)?;
        Ok(ModelInput::from_parts(
            cfg,
            &self.i0,
            &self.i1,
            &self.e_n,
            &e_tau,
            self.spec.normalize(self.tau),
        )?)
    }
}

fn make_clip<R: Rng>(
    rng: &mut R,
    scene: &SceneConfig,
    cfg: &ModelConfig,
    size: usize,
    mode: ExposureMode,
) -> Result<EvalSample, PipelineError> {
    scene.validate()?;
    let s = cfg.shutter_frames;
    let pattern = *scene.patterns.choose(rng).unwrap();
    let speed = if scene.max_speed > scene.min_speed {
        rng.random_range(scene.min_speed..scene.max_speed)
    } else {
        scene.min_speed
    };
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let velocity = (speed * heading.cos(), speed * heading.sin());
    let scene_seed: u64 = rng.random();
    let seq = make_scene(pattern, size, size, 2 * s, velocity, scene_seed)?;
    let sim = SimConfig {
        contrast: scene.contrast,
        threshold_jitter: scene.threshold_jitter,
        seed: rng.random(),
        ..SimConfig::default()
    };
    let stream = generate_events(&seq, &sim)?;
    let spec = sample_exposure(s, mode, seq.dt, rng)?;
    let [e0, e1] = spec.exposures;
    let i0 = synth_blur(&seq, e0.first, e0.last)?;
    let i1 = synth_blur(&seq, e1.first, e1.last)?;
    let e_n = shutter_stack(cfg, &stream, &spec)?;
    Ok(EvalSample {
        i0,
        i1,
        stream,
        spec,
        e_n,
        latents: seq.frames,
    })
}

/// Scene, exposures, both blurry frames and the events of the shutter
/// period, with a target drawn uniformly from the latent indices.
pub fn make_training_sample<R: Rng>(
    rng: &mut R,
    scene: &SceneConfig,
    cfg: &ModelConfig,
    size: usize,
    mode: ExposureMode,
) -> Result<TrainingSample, PipelineError> {
    let clip = make_clip(rng, scene, cfg, size, mode)?;
    let tau_index = rng.random_range(0..clip.spec.latent_count());
    let tau = clip.spec.latent_time(tau_index);
    let gt = clip.latents[tau_index].clone();
    Ok(TrainingSample {
        i0: clip.i0,
        i1: clip.i1,
        stream: clip.stream,
        spec: clip.spec,
        e_n: clip.e_n,
        tau_index,
        tau,
        gt,
    })
}

/// A fixed held-out set of `count` clips drawn from `seed`.
pub fn make_eval_set(
    scene: &SceneConfig,
    cfg: &ModelConfig,
    size: usize,
    mode: ExposureMode,
    count: usize,
    seed: u64,
) -> Result<Vec<EvalSample>, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| make_clip(&mut rng, scene, cfg, size, mode))
        .collect()
}
