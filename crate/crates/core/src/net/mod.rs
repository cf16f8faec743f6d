//! The interpolation network.
//!
//! Two blurry frames and the events of their shutter period go in, a sharp
//! frame at target time `tau` comes out:
//!
//! 1. A shared frame encoder and an event encoder build feature pyramids of
//!    `I0`, `I1` and the shutter stack `E_N`.
//! 2. Target-adaptive event sampling gates the event channels by how well
//!    they correlate with each frame, conditioned on `tau`.
//! 3. Each frame is cross-gated with its sampled events into `F0` and `F1`.
//! 4. Importance mapping attends from the sampled events to features of a
//!    short stack centered on `tau` and yields a map `omega` in (0, 1).
//! 5. `omega * F0 + (1 - omega) * F1` is decoded, with blended skip features,
//!    into a residual on top of the same blend of the input frames' logits.

mod layers;
pub mod verify;

pub use layers::{blend, logit_image, omega_weights, swap_weights, Ablation, Forward, Net, LOGIT_MARGIN};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{stack_events, tau_centered_stack, EventError, EventStack, EventStream};
use crate::frame::{Frame, FrameError};
use crate::sim::{ExposureSpec, LATENT_DT};
use crate::tensor::{ParamSet, Scalar, Tape, Tensor, TensorError};

/// Charbonnier smoothing constant.
pub const CHARBONNIER_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("model config: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("input {what} has shape {got:?}, expected {want:?}")]
    InputShape {
        what: &'static str,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("{h}x{w} input is not divisible by 2^{levels}")]
    Indivisible { h: usize, w: usize, levels: usize },
    #[error("tau {tau} lies outside the shutter period [{start}, {end}]")]
    TauOutsideShutter { tau: f64, start: f64, end: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Events(#[from] EventError),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels at every pyramid level.
    pub channels: usize,
    pub levels: usize,
    /// Temporal bins of the shutter-period stack `E_N`.
    pub event_bins: usize,
    /// Temporal bins of the tau-centered stack.
    pub tau_bins: usize,
    /// Half-width of the tau-centered window, seconds.
    pub tau_half_width: f64,
    /// Attention key dimension.
    pub key_dim: usize,
    pub kernel_size: usize,
    pub shutter_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            levels: 2,
            event_bins: 16,
            tau_bins: 4,
            tau_half_width: 2.0 * LATENT_DT,
            key_dim: 16,
            kernel_size: 3,
            shutter_frames: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.channels == 0 || self.channels % 2 != 0 {
            return bad(format!("channels must be even and positive, got {}", self.channels));
        }
        if self.key_dim == 0 || self.key_dim % 2 != 0 {
            return bad(format!("key_dim must be even and positive, got {}", self.key_dim));
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.event_bins == 0 || self.tau_bins == 0 {
            return bad("event_bins and tau_bins must be positive".into());
        }
        if !(self.tau_half_width > 0.0) {
            return bad(format!("tau_half_width must be positive, got {}", self.tau_half_width));
        }
        if self.shutter_frames < 2 {
            return bad(format!("shutter_frames must be at least 2, got {}", self.shutter_frames));
        }
        Ok(())
    }

    /// Spatial dims must survive `levels` halvings.
    pub fn check_dims(&self, h: usize, w: usize) -> Result<(), NetError> {
        let f = 1usize << self.levels;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(NetError::Indivisible {
                h,
                w,
                levels: self.levels,
            });
        }
        Ok(())
    }
}

/// `(cout, cin, k)` of every convolution, keyed by parameter prefix.
pub fn conv_layout(cfg: &ModelConfig) -> Vec<(String, usize, usize, usize)> {
    let (c, d, k) = (cfg.channels, cfg.key_dim, cfg.kernel_size);
    let mut convs = Vec::new();
    for (enc, cin) in [("frame_enc", 1), ("event_enc", cfg.event_bins), ("tau_enc", cfg.tau_bins)] {
        convs.push((format!("{enc}.stem"), c, cin, k));
        for l in 1..=cfg.levels {
            convs.push((format!("{enc}.l{l}.a"), c, c, k));
            convs.push((format!("{enc}.l{l}.g"), c, c, k));
        }
    }
    convs.push(("tes.post".into(), c, c, k));
    for l in 0..=cfg.levels {
        convs.push((format!("fuse.l{l}.e"), c, c, 1));
        convs.push((format!("fuse.l{l}.f"), c, c, 1));
    }
    for name in ["tim.q", "tim.k", "tim.v"] {
        convs.push((name.into(), d, c, 1));
    }
    convs.push(("tim.c1".into(), c, 2 * d, k));
    convs.push(("tim.c2".into(), 1, c, k));
    convs.push(("dec.mid.a".into(), c, c, k));
    convs.push(("dec.mid.g".into(), c, c, k));
    for l in (0..cfg.levels).rev() {
        convs.push((format!("dec.l{l}.merge"), c, 2 * c, k));
        if l > 0 {
            convs.push((format!("dec.l{l}.a"), c, c, k));
            convs.push((format!("dec.l{l}.g"), c, c, k));
        }
    }
    convs.push(("dec.refine.a".into(), c, c, k));
    convs.push(("dec.refine.g".into(), c, c, k));
    convs.push(("dec.out".into(), 1, c, k));
    convs
}

/// Seeded parameters: weights and biases uniform in `±1/sqrt(fan_in)`, except
/// the output conv, which starts at zero so an untrained model returns the
/// omega-blend of its input frames.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<T>, NetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    for (name, cout, cin, k) in conv_layout(cfg) {
        let fan_in = cin * k * k;
        p.insert_uniform(format!("{name}.w"), &[cout, cin, k, k], fan_in, &mut rng)?;
        p.insert_uniform(format!("{name}.b"), &[cout], fan_in, &mut rng)?;
    }
    for n in ["dec.out.w", "dec.out.b"] {
        p.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
    Ok(p)
}

/// Network inputs as tensors: both frames `1 x H x W`, the shutter stack
/// `N x H x W`, the tau-centered stack `K x H x W` and `tau` normalized to the
/// shutter period.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput<T> {
    pub i0: Tensor<T>,
    pub i1: Tensor<T>,
    pub e_n: Tensor<T>,
    pub e_tau: Tensor<T>,
    pub tau_norm: f64,
}

fn frame_tensor<T: Scalar>(f: &Frame) -> Tensor<T> {
    Tensor::from_fn(&[1, f.height, f.width], |i| T::of(f.data[i] as f64))
}

fn stack_tensor<T: Scalar>(s: &EventStack) -> Tensor<T> {
    Tensor::from_fn(&[s.bins, s.height, s.width], |i| T::of(s.data[i] as f64))
}

impl<T: Scalar> ModelInput<T> {
    pub fn from_parts(
        cfg: &ModelConfig,
        i0: &Frame,
        i1: &Frame,
        e_n: &EventStack,
        e_tau: &EventStack,
        tau_norm: f64,
    ) -> Result<Self, NetError> {
        i0.check_same_shape(i1)?;
        let (h, w) = i0.shape();
        cfg.check_dims(h, w)?;
        for (what, s, bins) in [("E_N", e_n, cfg.event_bins), ("E_tau", e_tau, cfg.tau_bins)] {
            if (s.bins, s.height, s.width) != (bins, h, w) {
                return Err(NetError::InputShape {
                    what,
                    got: vec![s.bins, s.height, s.width],
                    want: vec![bins, h, w],
                });
            }
        }
        Ok(Self {
            i0: frame_tensor(i0),
            i1: frame_tensor(i1),
            e_n: stack_tensor(e_n),
            e_tau: stack_tensor(e_tau),
            tau_norm,
        })
    }

    /// Builds both stacks from the raw stream for target time `tau`.
    pub fn from_events(
        cfg: &ModelConfig,
        i0: &Frame,
        i1: &Frame,
        stream: &EventStream,
        spec: &ExposureSpec,
        tau: f64,
    ) -> Result<Self, NetError> {
        if !spec.contains(tau) {
            return Err(NetError::TauOutsideShutter {
                tau,
                start: spec.start(),
                end: spec.end(),
            });
        }
        let e_n = shutter_stack(cfg, stream, spec)?;
        let e_tau = tau_centered_stack(stream, tau, cfg.tau_half_width, cfg.tau_bins)?;
        Self::from_parts(cfg, i0, i1, &e_n, &e_tau, spec.normalize(tau))
    }

    pub fn height(&self) -> usize {
        self.i0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.i0.shape()[2]
    }

    pub fn cast<U: Scalar>(&self) -> ModelInput<U> {
        ModelInput {
            i0: self.i0.cast(),
            i1: self.i1.cast(),
            e_n: self.e_n.cast(),
            e_tau: self.e_tau.cast(),
            tau_norm: self.tau_norm,
        }
    }
}

/// `E_N`: the whole shutter period in `event_bins` slices.
pub fn shutter_stack(cfg: &ModelConfig, stream: &EventStream, spec: &ExposureSpec) -> Result<EventStack, NetError> {
    Ok(stack_events(
        stream,
        spec.start(),
        spec.end(),
        cfg.event_bins,
        stream.height(),
        stream.width(),
    )?)
}

/// Concrete outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub frame: Frame,
    /// Importance map at bottleneck resolution.
    pub omega: Frame,
    pub score0: Vec<f32>,
    pub score1: Vec<f32>,
}

fn to_frame<T: Scalar>(t: &Tensor<T>) -> Result<Frame, NetError> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok(Frame::new(
        h,
        w,
        t.data().iter().map(|v| v.to_f32().unwrap()).collect(),
    )?)
}

/// Runs the model on a fresh tape and extracts the results.
pub fn predict<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    input: &ModelInput<T>,
    ablation: Ablation,
) -> Result<Prediction, NetError> {
    let mut tape = Tape::new();
    let net = Net::new(params, cfg);
    let out = net.forward(&mut tape, input, ablation)?;
    let to_vec = |v| tape.value(v).data().iter().map(|x: &T| x.to_f32().unwrap()).collect();
    Ok(Prediction {
        frame: to_frame(tape.value(out.frame))?,
        omega: to_frame(tape.value(out.omega))?,
        score0: to_vec(out.score0),
        score1: to_vec(out.score1),
    })
}

/// Charbonnier loss between two frames.
pub fn charbonnier(pred: &Frame, gt: &Frame) -> Result<f64, NetError> {
    pred.check_same_shape(gt)?;
    let mut tape = Tape::<f64>::new();
    let a = tape.input(frame_tensor(pred))?;
    let b = tape.input(frame_tensor(gt))?;
    let l = tape.charbonnier(a, b, CHARBONNIER_EPS)?;
    Ok(tape.value(l).item().unwrap())
}
