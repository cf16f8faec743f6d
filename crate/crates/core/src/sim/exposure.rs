use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SimError;

/// How exposure lengths are chosen for the two captured frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureMode {
    /// Both frames expose `m` latent slots.
    Symmetric(usize),
    /// `m` drawn uniformly from `[1, S-1]` per frame.
    RandEx,
}

/// Exposure of one captured frame: latent indices `first..=last` and the
/// matching continuous window `[t_s, t_e]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exposure {
    pub m: usize,
    pub first: usize,
    pub last: usize,
    pub t_s: f64,
    pub t_e: f64,
}

impl Exposure {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.t_s + self.t_e)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.t_s <= t && t <= self.t_e
    }
}

/// Two consecutive captured frames sharing a shutter period of `2S` latent
/// slots starting at t = 0. Frame `k` owns slots `kS..(k+1)S`; its exposure
/// occupies the first `m_k` of them and the rest is readout gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureSpec {
    pub shutter_frames: usize,
    pub dt: f64,
    pub exposures: [Exposure; 2],
}

impl ExposureSpec {
    pub fn from_lengths(shutter_frames: usize, dt: f64, m: [usize; 2]) -> Result<Self, SimError> {
        if shutter_frames < 2 {
            return Err(SimError::ShutterTooShort(shutter_frames));
        }
        let mut exposures = [Exposure {
            m: 0,
            first: 0,
            last: 0,
            t_s: 0.0,
            t_e: 0.0,
        }; 2];
        for (k, (&mk, e)) in m.iter().zip(exposures.iter_mut()).enumerate() {
            if mk < 1 || mk > shutter_frames - 1 {
                return Err(SimError::ExposureOutOfRange {
                    m: mk,
                    max: shutter_frames - 1,
                });
            }
            let first = k * shutter_frames;
            let last = first + mk - 1;
            *e = Exposure {
                m: mk,
                first,
                last,
                t_s: first as f64 * dt,
                t_e: (last + 1) as f64 * dt,
            };
        }
        Ok(Self {
            shutter_frames,
            dt,
            exposures,
        })
    }

    /// Start of the shutter period.
    pub fn start(&self) -> f64 {
        0.0
    }

    /// Length `2T` of the shutter period.
    pub fn period(&self) -> f64 {
        2.0 * self.shutter_frames as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.start() + self.period()
    }

    /// Number of latent frames (indices `0..2S`) inside the shutter period.
    pub fn latent_count(&self) -> usize {
        2 * self.shutter_frames
    }

    /// Timestamp of latent index `i`: the midpoint of its slot.
    pub fn latent_time(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dt
    }

    /// Target time mapped to `[0, 1]` across the shutter period.
    pub fn normalize(&self, tau: f64) -> f64 {
        (tau - self.start()) / self.period()
    }

    pub fn contains(&self, tau: f64) -> bool {
        tau >= self.start() && tau <= self.end()
    }
}

pub fn sample_exposure<R: Rng + ?Sized>(
    shutter_frames: usize,
    mode: ExposureMode,
    dt: f64,
    rng: &mut R,
) -> Result<ExposureSpec, SimError> {
    if shutter_frames < 2 {
        return Err(SimError::ShutterTooShort(shutter_frames));
    }
    let m = match mode {
        ExposureMode::Symmetric(m) => [m, m],
        ExposureMode::RandEx => {
            let hi = shutter_frames - 1;
            [rng.random_range(1..=hi), rng.random_range(1..=hi)]
        }
    };
    ExposureSpec::from_lengths(shutter_frames, dt, m)
}
