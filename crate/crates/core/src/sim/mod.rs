//! Synthetic ground truth: moving scenes, a contrast-threshold event model,
//! frame-averaging blur and blind-exposure sampling.

mod dvs;
mod exposure;
mod scene;

pub use dvs::{generate_events, ReferenceInit, SimConfig};
pub use exposure::{sample_exposure, Exposure, ExposureMode, ExposureSpec};
pub use scene::{make_scene, Pattern};

use thiserror::Error;

use crate::frame::Frame;

/// Latent frame spacing used by the generated scenes, in seconds.
pub const LATENT_DT: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown pattern id {0:?} (expected blobs, bars or checker)")]
    UnknownPattern(String),
    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("scene dimensions must be non-zero")]
    ZeroDims,
    #[error("exposure length m={m} outside [1, {max}]")]
    ExposureOutOfRange { m: usize, max: usize },
    #[error("shutter must span at least 2 latent frames, got {0}")]
    ShutterTooShort(usize),
    #[error("blur window [{start}, {end}] invalid for {len} frames")]
    BadWindow { start: usize, end: usize, len: usize },
    #[error("contrast threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error(transparent)]
    Events(#[from] crate::events::EventError),
}

/// Sharp latent frames at timestamps `t_first + i * dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Frame>,
    pub t_first: f64,
    pub dt: f64,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        self.t_first + i as f64 * self.dt
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }

    /// Index of the frame whose timestamp is nearest `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let i = ((t - self.t_first) / self.dt).round();
        (i.max(0.0) as usize).min(self.len().saturating_sub(1))
    }
}

/// Mean of frames `start..=end`.
pub fn synth_blur(seq: &FrameSequence, start: usize, end: usize) -> Result<Frame, SimError> {
    if start > end || end >= seq.len() {
        return Err(SimError::BadWindow {
            start,
            end,
            len: seq.len(),
        });
    }
    let first = &seq.frames[start];
    let mut acc = vec![0.0f64; first.data.len()];
    for f in &seq.frames[start..=end] {
        for (a, &v) in acc.iter_mut().zip(&f.data) {
            *a += v as f64;
        }
    }
    let m = (end - start + 1) as f64;
    Ok(Frame {
        height: first.height,
        width: first.width,
        data: acc.into_iter().map(|a| (a / m) as f32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_of(values: &[f32]) -> FrameSequence {
        FrameSequence {
            frames: values.iter().map(|&v| Frame::filled(3, 4, v)).collect(),
            t_first: 0.005,
            dt: 0.01,
        }
    }

    #[test]
    fn blur_of_single_frame_is_identity() {
        let seq = make_scene(Pattern::Blobs, 16, 16, 4, (1.0, 0.5), 3).unwrap();
        assert_eq!(synth_blur(&seq, 2, 2).unwrap(), seq.frames[2]);
    }

    #[test]
    fn blur_of_constant_window_is_exact() {
        let seq = seq_of(&[0.37; 9]);
        assert_eq!(synth_blur(&seq, 0, 8).unwrap(), seq.frames[0]);
    }

    #[test]
    fn blur_two_level_mean() {
        let seq = seq_of(&[0.2, 0.4]);
        let b = synth_blur(&seq, 0, 1).unwrap();
        assert!(b.data.iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn blur_rejects_bad_windows() {
        let seq = seq_of(&[0.2, 0.4]);
        assert!(matches!(synth_blur(&seq, 1, 0), Err(SimError::BadWindow { .. })));
        assert!(matches!(synth_blur(&seq, 0, 2), Err(SimError::BadWindow { .. })));
    }
}
