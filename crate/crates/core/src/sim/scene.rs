use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FrameSequence, SimError, LATENT_DT};
use crate::frame::Frame;

/// Darkest value a generated scene produces.
pub const SCENE_FLOOR: f64 = 0.1;
/// Brightest value a generated scene produces. Kept below 1 so that
/// reconstructions carrying event quantization error are rarely clipped.
pub const SCENE_CEIL: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Blobs,
    Bars,
    Checker,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Blobs, Pattern::Bars, Pattern::Checker];
}

impl FromStr for Pattern {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "blobs" => Ok(Pattern::Blobs),
            "bars" => Ok(Pattern::Bars),
            "checker" => Ok(Pattern::Checker),
            other => Err(SimError::UnknownPattern(other.to_string())),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::Blobs => "blobs",
            Pattern::Bars => "bars",
            Pattern::Checker => "checker",
        })
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    inv_two_sigma2: f64,
    amp: f64,
}

/// Periodic base image; every pattern is continuous and wraps on the
/// `width` x `height` torus so sub-pixel translations are well defined.
enum Base {
    Blobs { background: f64, blobs: Vec<Blob> },
    Bars { kx: f64, ky: f64, phase: f64, sharp: f64 },
    Checker { kx: f64, ky: f64, sharp: f64 },
}

fn wrapped(d: f64, period: f64) -> f64 {
    let r = d.rem_euclid(period);
    if r >= period / 2.0 {
        r - period
    } else {
        r
    }
}

impl Base {
    fn sample(rng: &mut ChaCha8Rng, pattern: Pattern, h: usize, w: usize) -> Self {
        let size = h.min(w) as f64;
        match pattern {
            Pattern::Blobs => {
                let n = rng.random_range(3..=6);
                let blobs = (0..n)
                    .map(|_| {
                        let sigma = rng.random_range(0.06..0.14) * size;
                        let sign = if rng.random_bool(0.3) { -1.0 } else { 1.0 };
                        Blob {
                            cx: rng.random_range(0.0..w as f64),
                            cy: rng.random_range(0.0..h as f64),
                            inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                            amp: sign * rng.random_range(0.25..0.5),
                        }
                    })
                    .collect();
                Base::Blobs {
                    background: rng.random_range(0.2..0.4),
                    blobs,
                }
            }
            Pattern::Bars => Base::Bars {
                kx: rng.random_range(1..=3) as f64 / w as f64,
                ky: rng.random_range(0..=2) as f64 / h as f64,
                phase: rng.random_range(0.0..TAU),
                sharp: rng.random_range(1.5..4.0),
            },
            Pattern::Checker => Base::Checker {
                kx: rng.random_range(1..=3) as f64 / w as f64,
                ky: rng.random_range(1..=3) as f64 / h as f64,
                sharp: rng.random_range(2.0..5.0),
            },
        }
    }

    fn eval(&self, x: f64, y: f64, w: f64, h: f64) -> f64 {
        let v = match self {
            Base::Blobs { background, blobs } => {
                let mut v = *background;
                for b in blobs {
                    let dx = wrapped(x - b.cx, w);
                    let dy = wrapped(y - b.cy, h);
                    v += b.amp * (-(dx * dx + dy * dy) * b.inv_two_sigma2).exp();
                }
                v
            }
            Base::Bars {
                kx,
                ky,
                phase,
                sharp,
            } => 0.475 + 0.3 * (sharp * (TAU * (kx * x + ky * y) + phase).sin()).tanh(),
            Base::Checker { kx, ky, sharp } => {
                0.475 + 0.3 * (sharp * (TAU * kx * x).sin() * (TAU * ky * y).sin()).tanh()
            }
        };
        v.clamp(SCENE_FLOOR, SCENE_CEIL)
    }
}

/// Deterministic pattern translating by `velocity` (px per frame, `(vx, vy)`)
/// with wrap-around. Frames are spaced [`LATENT_DT`] apart starting at
/// `LATENT_DT / 2`, so latent frame `i` is the midpoint of slot `[i dt, (i+1) dt]`.
pub fn make_scene(
    pattern: Pattern,
    height: usize,
    width: usize,
    n_frames: usize,
    velocity: (f64, f64),
    seed: u64,
) -> Result<FrameSequence, SimError> {
    if n_frames < 2 {
        return Err(SimError::TooFewFrames {
            need: 2,
            got: n_frames,
        });
    }
    if height == 0 || width == 0 {
        return Err(SimError::ZeroDims);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Base::sample(&mut rng, pattern, height, width);
    let (wf, hf) = (width as f64, height as f64);
    let frames = (0..n_frames)
        .map(|k| {
            let sx = (k as f64 * velocity.0).rem_euclid(wf);
            let sy = (k as f64 * velocity.1).rem_euclid(hf);
            let mut data = Vec::with_capacity(height * width);
            for y in 0..height {
                for x in 0..width {
                    data.push(base.eval(x as f64 - sx, y as f64 - sy, wf, hf) as f32);
                }
            }
            Frame {
                height,
                width,
                data,
            }
        })
        .collect();
    Ok(FrameSequence {
        frames,
        t_first: LATENT_DT / 2.0,
        dt: LATENT_DT,
    })
}
