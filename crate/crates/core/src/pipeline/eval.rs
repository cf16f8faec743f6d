use std::collections::HashMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::data::{EvalSample, SceneConfig};
use super::PipelineError;
use crate::events::EventStream;
use crate::frame::Frame;
use crate::metrics::{psnr, ssim};
use crate::net::{charbonnier, predict, shutter_stack, Ablation, ModelConfig, ModelInput};
use crate::sim::{ExposureMode, ExposureSpec};
use crate::tensor::{ParamSet, Scalar};

/// Per-frame PSNR ceiling used when averaging: a blurry frame exposed for a
/// single latent slot equals that latent frame and would score infinity.
pub const PSNR_CEILING_DB: f64 = 60.0;

fn capped_psnr(a: &Frame, b: &Frame) -> Result<f64, PipelineError> {
    Ok(psnr(a, b)?.min(PSNR_CEILING_DB))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub samples: usize,
    /// Seed of the held-out set, kept apart from training seeds.
    pub seed: u64,
    pub size: usize,
    pub exposure: ExposureMode,
    pub scene: SceneConfig,
    pub variants: Vec<Ablation>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 8,
            seed: 1000,
            size: 64,
            exposure: ExposureMode::RandEx,
            scene: SceneConfig::default(),
            variants: vec![Ablation::Full, Ablation::FixedOmega, Ablation::SwapOmega],
        }
    }
}

/// One interpolated frame with its importance map.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolated {
    pub tau: f64,
    pub frame: Frame,
    pub omega: Frame,
}

/// One model pass per target time, all sharing the shutter stack.
#[allow(clippy::too_many_arguments)]
pub fn interpolate<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    i0: &Frame,
    i1: &Frame,
    stream: &EventStream,
    spec: &ExposureSpec,
    taus: &[f64],
    ablation: Ablation,
) -> Result<Vec<Interpolated>, PipelineError> {
    if let Some(&tau) = taus.iter().find(|&&t| !spec.contains(t)) {
        return Err(PipelineError::TauOutsideShutter {
            tau,
            start: spec.start(),
            end: spec.end(),
        });
    }
    let e_n = shutter_stack(cfg, stream, spec)?;
    taus.iter()
        .map(|&tau| {
            let e_tau = crate::events::tau_centered_stack(stream, tau, cfg.tau_half_width, cfg.tau_bins)?;
            let input = ModelInput::from_parts(cfg, i0, i1, &e_n, &e_tau, spec.normalize(tau))?;
            let p = predict(params, cfg, &input, ablation)?;
            Ok(Interpolated {
                tau,
                frame: p.frame,
                omega: p.omega,
            })
        })
        .collect()
}

/// Index of the blurry frame whose exposure midpoint is nearer `tau`; ties go
/// to the first frame.
pub fn nearest_blurry(spec: &ExposureSpec, tau: f64) -> usize {
    let [e0, e1] = spec.exposures;
    if (tau - e0.midpoint()).abs() <= (tau - e1.midpoint()).abs() {
        0
    } else {
        1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauMetrics {
    /// Latent index within the shutter period.
    pub index: usize,
    pub tau_norm: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ablation: Ablation,
    pub seed: u64,
    pub samples: usize,
    pub per_tau: Vec<TauMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    pub charbonnier: f64,
}

#[derive(Clone, Copy, Default)]
struct Acc {
    psnr: f64,
    ssim: f64,
    base_psnr: f64,
    base_ssim: f64,
    charb: f64,
}

impl Acc {
    fn add(&mut self, o: &Acc) {
        self.psnr += o.psnr;
        self.ssim += o.ssim;
        self.base_psnr += o.base_psnr;
        self.base_ssim += o.base_ssim;
        self.charb += o.charb;
    }
}

fn eval_sample(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    s: &EvalSample,
    ablation: Ablation,
) -> Result<Vec<Acc>, PipelineError> {
    let n = s.spec.latent_count();
    let taus: Vec<f64> = (0..n).map(|i| s.spec.latent_time(i)).collect();
    let outs = interpolate(params, cfg, &s.i0, &s.i1, &s.stream, &s.spec, &taus, ablation)?;
    let mut accs = Vec::with_capacity(n);
    for (i, out) in outs.iter().enumerate() {
        let gt = &s.latents[i];
        let base = if nearest_blurry(&s.spec, out.tau) == 0 { &s.i0 } else { &s.i1 };
        accs.push(Acc {
            psnr: capped_psnr(&out.frame, gt)?,
            ssim: ssim(&out.frame, gt)?,
            base_psnr: capped_psnr(base, gt)?,
            base_ssim: ssim(base, gt)?,
            charb: charbonnier(&out.frame, gt)?,
        });
    }
    Ok(accs)
}

/// Scores every latent index of every clip; metrics are averaged over clips
/// per index and over all frames for the headline numbers. Clips are spread
/// over `threads` workers without affecting the result.
pub fn evaluate(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    set: &[EvalSample],
    ablation: Ablation,
    seed: u64,
    threads: usize,
) -> Result<EvalReport, PipelineError> {
    if set.is_empty() {
        return Err(PipelineError::Config("evaluation set is empty".into()));
    }
    let n = set[0].spec.latent_count();
    if set.iter().any(|s| s.spec.latent_count() != n) {
        return Err(PipelineError::Config("evaluation clips disagree on shutter length".into()));
    }
    let threads = threads.clamp(1, set.len());
    let per_sample: Vec<Result<Vec<Acc>, PipelineError>> = if threads == 1 {
        set.iter().map(|s| eval_sample(params, cfg, s, ablation)).collect()
    } else {
        let chunk = set.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = set
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|s| eval_sample(params, cfg, s, ablation))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
        })
    };
    let mut per_tau = vec![Acc::default(); n];
    for r in per_sample {
        for (a, b) in per_tau.iter_mut().zip(r?) {
            a.add(&b);
        }
    }
    let k = set.len() as f64;
    let mut total = Acc::default();
    let rows = per_tau
        .iter()
        .enumerate()
        .map(|(i, a)| {
            total.add(a);
            TauMetrics {
                index: i,
                tau_norm: set[0].spec.normalize(set[0].spec.latent_time(i)),
                psnr: a.psnr / k,
                ssim: a.ssim / k,
                baseline_psnr: a.base_psnr / k,
                baseline_ssim: a.base_ssim / k,
            }
        })
        .collect();
    let m = k * n as f64;
    Ok(EvalReport {
        ablation,
        seed,
        samples: set.len(),
        per_tau: rows,
        psnr: total.psnr / m,
        ssim: total.ssim / m,
        baseline_psnr: total.base_psnr / m,
        baseline_ssim: total.base_ssim / m,
        charbonnier: total.charb / m,
    })
}

/// Evaluates each requested variant with its own checkpoint; `SwapOmega`
/// runs on the `Full` checkpoint.
pub fn run_ablation_suite(
    checkpoints: &HashMap<Ablation, ParamSet<f32>>,
    cfg: &ModelConfig,
    set: &[EvalSample],
    variants: &[Ablation],
    seed: u64,
    threads: usize,
) -> Result<Vec<EvalReport>, PipelineError> {
    variants
        .iter()
        .map(|&v| {
            let source = if v.retrained() { v } else { Ablation::Full };
            let params = checkpoints
                .get(&source)
                .ok_or(PipelineError::MissingCheckpoint(source))?;
            evaluate(params, cfg, set, v, seed, threads)
        })
        .collect()
}

/// Plain-text comparison table, one row per report.
pub fn ablation_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<14} {:>9} {:>7} {:>12} {:>13}", "variant", "PSNR", "SSIM", "Charbonnier", "baseline PSNR").unwrap();
    for r in reports {
        writeln!(
            s,
            "{:<14} {:>9.3} {:>7.4} {:>12.5} {:>13.3}",
            r.ablation.name(),
            r.psnr,
            r.ssim,
            r.charbonnier,
            r.baseline_psnr
        )
        .unwrap();
    }
    s
}
