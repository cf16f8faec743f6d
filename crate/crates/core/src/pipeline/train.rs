use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{make_training_sample, SceneConfig};
use super::optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
use super::PipelineError;
use crate::net::{init_params, Ablation, ModelConfig, Net, NetError, CHARBONNIER_EPS};
use crate::sim::ExposureMode;
use crate::tensor::{ParamSet, Tape, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub scene: SceneConfig,
    pub shutter_frames: usize,
    /// Side of the square training crops.
    pub crop_size: usize,
    pub exposure: ExposureMode,
    pub ablation: Ablation,
    /// Trailing window for the smoothed loss.
    pub smoothing_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            iterations: 500,
            batch_size: 1,
            lr: 5e-4,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            seed: 0,
            scene: SceneConfig::default(),
            shutter_frames: 10,
            crop_size: 64,
            exposure: ExposureMode::RandEx,
            ablation: Ablation::Full,
            smoothing_window: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.iterations == 0 || self.batch_size == 0 || self.smoothing_window == 0 {
            return bad("iterations, batch_size and smoothing_window must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.eps > 0.0) {
            return bad(format!("lr and eps must be positive, got {} and {}", self.lr, self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if self.shutter_frames != model.shutter_frames {
            return bad(format!(
                "train.shutter_frames={} disagrees with model.shutter_frames={}",
                self.shutter_frames, model.shutter_frames
            ));
        }
        if let ExposureMode::Symmetric(m) = self.exposure {
            if m == 0 || m >= self.shutter_frames {
                return bad(format!("symmetric exposure m={m} outside [1, {}]", self.shutter_frames - 1));
            }
        }
        model.validate()?;
        model.check_dims(self.crop_size, self.crop_size)?;
        self.scene.validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet<f32>,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    pub state: OptimizerState<f32>,
}

fn non_finite(step: usize, e: PipelineError) -> PipelineError {
    match e {
        PipelineError::Net(NetError::Tensor(TensorError::NonFinite { op })) => PipelineError::NonFiniteLoss {
            step,
            detail: format!("{op} produced a non-finite value"),
        },
        other => other,
    }
}

/// Trains from scratch on freshly generated toy scenes. `progress` is called
/// after every step with the step index and its loss.
pub fn train_toy(
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<TrainOutcome, PipelineError> {
    cfg.validate(model)?;
    let mut params = init_params::<f32>(model, cfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let hp = cfg.optimizer();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let lr = cosine_lr(step, cfg.iterations, cfg.lr)?;
        let mut grads = ParamSet::new();
        for (name, t) in params.iter() {
            grads.insert(name, Tensor::zeros(t.shape()))?;
        }
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let loss = batch_item(&params, model, cfg, &mut rng, &mut grads).map_err(|e| non_finite(step, e))?;
            total += loss;
        }
        let loss = total / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(PipelineError::NonFiniteLoss {
                step,
                detail: format!("loss = {loss}"),
            });
        }
        if cfg.batch_size > 1 {
            let inv = 1.0 / cfg.batch_size as f32;
            for (_, g) in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
        }
        adamw_step(&mut params, &grads, &mut state, lr, &hp)?;
        losses.push(loss);
        if let Some(cb) = progress.as_mut() {
            cb(step, loss);
        }
    }
    Ok(TrainOutcome { params, losses, state })
}

fn batch_item(
    params: &ParamSet<f32>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    grads: &mut ParamSet<f32>,
) -> Result<f64, PipelineError> {
    let sample = make_training_sample(rng, &cfg.scene, model, cfg.crop_size, cfg.exposure)?;
    let input = sample.input::<f32>(model)?;
    let mut tape = Tape::new();
    let out = Net::new(params, model).forward(&mut tape, &input, cfg.ablation)?;
    let gt = tape.input(Tensor::new(vec![1, sample.gt.height, sample.gt.width], sample.gt.data)?)?;
    let loss = tape.charbonnier(out.frame, gt, CHARBONNIER_EPS as f32)?;
    let value = tape.value(loss).item().unwrap() as f64;
    let g = tape.backward(loss)?;
    for name in g.param_names() {
        let src = g.param(name).unwrap();
        let dst = grads.get_mut(name).unwrap();
        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d += *s;
        }
    }
    Ok(value)
}

/// Trailing mean over at most `window` steps ending at each step.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        acc += l;
        if i >= window {
            acc -= losses[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Two whitespace-separated columns: step and loss.
pub fn write_loss_curve(losses: &[f64], path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{i} {l:.9e}")?;
    }
    f.flush()?;
    Ok(())
}
