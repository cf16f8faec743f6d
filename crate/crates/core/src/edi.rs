//! Closed-form latent frame recovery from a blurry frame and its events.
//!
//! A blurry frame is the time average of the latent frames over its exposure,
//! and each latent frame is a per-pixel exponential of the signed event count
//! away from any other. Dividing the blurry frame by the average of those
//! exponentials over the exposure recovers the latent frame at any target
//! time, including times outside the exposure window.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{cumulative_counts, integrate, EventStream};
use crate::frame::{Frame, FrameError};

const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EdiError {
    #[error("exposure window [{t_s}, {t_e}] has no length")]
    EmptyExposure { t_s: f64, t_e: f64 },
    #[error("contrast threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("frame is {frame:?} but events are {events:?}")]
    DimMismatch {
        frame: (usize, usize),
        events: (usize, usize),
    },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdiConfig {
    pub contrast: f64,
    /// Quadrature samples across the exposure window.
    pub samples: usize,
}

impl EdiConfig {
    pub fn new(contrast: f64, samples: usize) -> Self {
        Self { contrast, samples }
    }

    fn validate(&self) -> Result<(), EdiError> {
        if !(self.contrast > 0.0) {
            return Err(EdiError::BadThreshold(self.contrast));
        }
        if self.samples == 0 {
            return Err(EdiError::NoSamples);
        }
        Ok(())
    }
}

fn check_dims(frame: &Frame, stream: &EventStream) -> Result<(), EdiError> {
    if frame.shape() != (stream.height(), stream.width()) {
        return Err(EdiError::DimMismatch {
            frame: frame.shape(),
            events: (stream.height(), stream.width()),
        });
    }
    Ok(())
}

/// `L(t) = L(tau) * exp(c * E_{tau -> t})`, elementwise.
pub fn propagate_latent(
    latent: &Frame,
    stream: &EventStream,
    tau: f64,
    t: f64,
    contrast: f64,
) -> Result<Frame, EdiError> {
    check_dims(latent, stream)?;
    let grid = integrate(stream, tau, t);
    let data = latent
        .data
        .iter()
        .zip(&grid.data)
        .map(|(&l, &e)| (l as f64 * (contrast * e as f64).exp()) as f32)
        .collect();
    Ok(Frame::new(latent.height, latent.width, data)?)
}

/// Midpoints of `samples` equal sub-intervals of `[t_s, t_e]`.
pub fn sample_times(t_s: f64, t_e: f64, samples: usize) -> Vec<f64> {
    let step = (t_e - t_s) / samples as f64;
    (0..samples).map(|j| t_s + (j as f64 + 0.5) * step).collect()
}

/// Recovers `L(tau)` from blurry frame `blurry` exposed over `[t_s, t_e]`.
/// The exposure integral is evaluated with the midpoint rule; the result is
/// clamped to [0, 1].
pub fn edi_reconstruct(
    blurry: &Frame,
    stream: &EventStream,
    t_s: f64,
    t_e: f64,
    tau: f64,
    cfg: &EdiConfig,
) -> Result<Frame, EdiError> {
    cfg.validate()?;
    if !(t_e > t_s) {
        return Err(EdiError::EmptyExposure { t_s, t_e });
    }
    check_dims(blurry, stream)?;
    let mut times = sample_times(t_s, t_e, cfg.samples);
    times.push(tau);
    let counts = cumulative_counts(stream, &times);
    let (at_tau, at_samples) = counts.split_last().unwrap();

    let c = cfg.contrast;
    let inv_j = 1.0 / cfg.samples as f64;
    let data = blurry
        .data
        .iter()
        .enumerate()
        .map(|(p, &i)| {
            let denom: f64 = at_samples
                .iter()
                .map(|cnt| (c * (cnt[p] - at_tau[p]) as f64).exp())
                .sum::<f64>()
                * inv_j;
            (i as f64 / denom.max(MIN_DENOMINATOR)).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(Frame::new(blurry.height, blurry.width, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use crate::sim::{generate_events, make_scene, synth_blur, ExposureSpec, Pattern, SimConfig};

    fn scene_setup() -> (crate::sim::FrameSequence, EventStream, ExposureSpec) {
        let seq = make_scene(Pattern::Blobs, 64, 64, 21, (1.0, 0.5), 0).unwrap();
        let ev = generate_events(&seq, &SimConfig::default()).unwrap();
        let spec = ExposureSpec::from_lengths(10, seq.dt, [9, 9]).unwrap();
        (seq, ev, spec)
    }

    #[test]
    fn empty_stream_is_identity() {
        let ev = EventStream::empty(4, 3, 0.0, 1.0).unwrap();
        let f = Frame::new(3, 4, (0..12).map(|i| i as f32 / 12.0).collect()).unwrap();
        for tau in [0.0, 0.3, 0.9, 2.0] {
            let r = edi_reconstruct(&f, &ev, 0.2, 0.5, tau, &EdiConfig::new(0.2, 5)).unwrap();
            assert_eq!(r, f);
            assert_eq!(propagate_latent(&f, &ev, 0.1, tau, 0.2).unwrap(), f);
        }
    }

    #[test]
    fn propagation_round_trip() {
        let (seq, ev, _) = scene_setup();
        let l = &seq.frames[3];
        let fwd = propagate_latent(l, &ev, seq.timestamp(3), seq.timestamp(11), 0.2).unwrap();
        let back = propagate_latent(&fwd, &ev, seq.timestamp(11), seq.timestamp(3), 0.2).unwrap();
        for (a, b) in back.data.iter().zip(&l.data) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn propagation_tracks_ground_truth() {
        // Quantization error grows with the number of crossings, so check
        // neighbouring latent frames.
        let (seq, ev, _) = scene_setup();
        for i in 0..seq.len() - 1 {
            let p = propagate_latent(&seq.frames[i], &ev, seq.timestamp(i), seq.timestamp(i + 1), 0.2)
                .unwrap();
            let db = psnr(&p, &seq.frames[i + 1]).unwrap();
            assert!(db >= 30.0, "{i}: {db}");
        }
    }

    #[test]
    fn reconstruction_inside_exposure() {
        let (seq, ev, spec) = scene_setup();
        let e = spec.exposures[0];
        let blurry = synth_blur(&seq, e.first, e.last).unwrap();
        let cfg = EdiConfig::new(0.2, e.m);
        for i in e.first..=e.last {
            let r = edi_reconstruct(&blurry, &ev, e.t_s, e.t_e, seq.timestamp(i), &cfg).unwrap();
            let db = psnr(&r, &seq.frames[i]).unwrap();
            assert!(db >= 30.0, "latent {i}: {db}");
        }
    }

    #[test]
    fn outside_exposure_consistent_with_propagation() {
        let (seq, ev, spec) = scene_setup();
        let e = spec.exposures[0];
        let blurry = synth_blur(&seq, e.first, e.last).unwrap();
        let cfg = EdiConfig::new(0.2, e.m);
        let at_end = edi_reconstruct(&blurry, &ev, e.t_s, e.t_e, e.t_e, &cfg).unwrap();
        for i in e.last + 1..2 * spec.shutter_frames {
            let tau = seq.timestamp(i);
            let direct = edi_reconstruct(&blurry, &ev, e.t_s, e.t_e, tau, &cfg).unwrap();
            let via = propagate_latent(&at_end, &ev, e.t_e, tau, 0.2).unwrap();
            let worst = direct
                .data
                .iter()
                .zip(&via.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(worst <= 1e-2, "latent {i}: {worst}");
        }
    }

    #[test]
    fn argument_errors() {
        let ev = EventStream::empty(2, 2, 0.0, 1.0).unwrap();
        let f = Frame::filled(2, 2, 0.5);
        assert!(matches!(
            edi_reconstruct(&f, &ev, 0.5, 0.5, 0.5, &EdiConfig::new(0.2, 3)),
            Err(EdiError::EmptyExposure { .. })
        ));
        assert!(matches!(
            edi_reconstruct(&f, &ev, 0.1, 0.5, 0.5, &EdiConfig::new(0.2, 0)),
            Err(EdiError::NoSamples)
        ));
        assert!(matches!(
            edi_reconstruct(&Frame::filled(3, 2, 0.5), &ev, 0.1, 0.5, 0.5, &EdiConfig::new(0.2, 2)),
            Err(EdiError::DimMismatch { .. })
        ));
    }

    #[test]
    fn sample_times_are_midpoints() {
        let t = sample_times(0.0, 0.09, 9);
        for (j, tj) in t.iter().enumerate() {
            assert!((tj - (j as f64 + 0.5) * 0.01).abs() < 1e-15);
        }
    }
}
