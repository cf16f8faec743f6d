use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use evfi::edi::{edi_reconstruct, EdiConfig};
use evfi::events::{read_events, write_events};
use evfi::frame::Frame;
use evfi::metrics::psnr;
use evfi::net::{init_params, shutter_stack, Ablation, ModelConfig};
use evfi::pipeline::{
    ablation_table, interpolate, make_eval_set, omega_sweep, run_ablation_suite, saliency, smoothed, train_toy,
    write_loss_curve, EvalSample,
};
use evfi::sim::{generate_events, make_scene, sample_exposure, synth_blur, ExposureSpec, SimConfig};
use evfi::tensor::{read_checkpoint, write_checkpoint, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;

const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentEntry {
    pub index: usize,
    pub t: f64,
    pub file: String,
}

/// Everything `simulate` wrote, with paths relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub contrast: f64,
    /// Exposure length of each captured frame, in latent slots.
    pub m: [usize; 2],
    pub spec: ExposureSpec,
    pub events: String,
    pub blurry: [String; 2],
    pub latent: Vec<LatentEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read manifest {}: {e}", path.display())))?;
        let m = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("manifest {}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, dir))
    }

    /// Latent frame recorded at `tau`, if any.
    fn latent_at(&self, tau: f64) -> Option<&LatentEntry> {
        self.latent.iter().find(|l| (l.t - tau).abs() <= 1e-9)
    }
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
    write_text(&out.join("config.json"), &cfg.to_json())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn write_frame(out: &Path, stem: &str, f: &Frame) -> Result<(), CliError> {
    f.write_frm(out.join(format!("{stem}.frm")))?;
    f.write_pgm(out.join(format!("{stem}.pgm")))?;
    Ok(())
}

/// Latent scene of one shutter period, its events, both blurry frames and a
/// manifest.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    cfg.validate()?;
    prepare_out(out, cfg)?;
    let s = &cfg.sim;
    let n = cfg.model.shutter_frames;
    let seq = make_scene(
        s.pattern,
        s.height,
        s.width,
        2 * n,
        (s.velocity[0], s.velocity[1]),
        s.seed,
    )?;
    let sim = SimConfig {
        contrast: s.contrast,
        threshold_jitter: s.threshold_jitter,
        reference_init: s.reference_init,
        seed: s.seed,
        ..SimConfig::default()
    };
    let stream = generate_events(&seq, &sim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let spec = sample_exposure(n, s.exposure, seq.dt, &mut rng)?;
    fs::create_dir_all(out.join("latent"))?;
    let mut latent = Vec::with_capacity(seq.len());
    for (i, f) in seq.frames.iter().enumerate() {
        let stem = format!("latent/latent_{i:03}");
        write_frame(out, &stem, f)?;
        latent.push(LatentEntry {
            index: i,
            t: seq.timestamp(i),
            file: format!("{stem}.frm"),
        });
    }
    let mut blurry = [String::new(), String::new()];
    for (k, e) in spec.exposures.iter().enumerate() {
        let b = synth_blur(&seq, e.first, e.last)?;
        write_frame(out, &format!("blurry_{k}"), &b)?;
        blurry[k] = format!("blurry_{k}.frm");
    }
    write_events(&stream, out.join("events.evt"))?;
    let manifest = Manifest {
        seed: s.seed,
        height: s.height,
        width: s.width,
        contrast: s.contrast,
        m: spec.exposures.map(|e| e.m),
        spec,
        events: "events.evt".into(),
        blurry,
        latent,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, Default)]
pub struct EdiArgs {
    pub manifest: PathBuf,
    pub frame: usize,
    pub blurry: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub tau: f64,
    pub contrast: Option<f64>,
    pub samples: Option<usize>,
    pub gt: Option<PathBuf>,
}

/// Writes `L(tau)` recovered from one blurry frame; returns the PSNR against
/// ground truth when one is available.
pub fn reconstruct_edi(cfg: &RunConfig, args: &EdiArgs, out: &Path) -> Result<Option<f64>, CliError> {
    let (m, dir) = Manifest::load(&args.manifest)?;
    if args.frame > 1 {
        return Err(CliError::config(format!("--frame must be 0 or 1, got {}", args.frame)));
    }
    prepare_out(out, cfg)?;
    let exposure = m.spec.exposures[args.frame];
    let blurry = Frame::read_frm(args.blurry.clone().unwrap_or_else(|| dir.join(&m.blurry[args.frame])))?;
    let stream = read_events(args.events.clone().unwrap_or_else(|| dir.join(&m.events)))?;
    let edi = EdiConfig::new(
        args.contrast.unwrap_or(m.contrast),
        args.samples.unwrap_or(exposure.m),
    );
    let latent = edi_reconstruct(&blurry, &stream, exposure.t_s, exposure.t_e, args.tau, &edi)?;
    write_frame(out, "edi", &latent)?;
    let gt = match (&args.gt, m.latent_at(args.tau)) {
        (Some(p), _) => Some(Frame::read_frm(p)?),
        (None, Some(l)) => Some(Frame::read_frm(dir.join(&l.file))?),
        (None, None) => None,
    };
    let score = gt.map(|g| psnr(&latent, &g)).transpose()?;
    write_json(
        &out.join("edi.json"),
        &json!({
            "tau": args.tau,
            "frame": args.frame,
            "contrast": edi.contrast,
            "samples": edi.samples,
            "psnr_db": score,
        }),
    )?;
    Ok(score)
}

/// Trains from scratch and writes the checkpoint, loss curve and a summary.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<ParamSet<f32>, CliError> {
    cfg.validate()?;
    prepare_out(out, cfg)?;
    let t = &cfg.train;
    let mut report = |step: usize, loss: f64| {
        if (step + 1) % 50 == 0 || step + 1 == t.iterations {
            eprintln!("step {:>5}/{}  loss {loss:.6}", step + 1, t.iterations);
        }
    };
    let outcome = train_toy(&cfg.model, t, Some(&mut report))?;
    write_checkpoint(&out.join("model.ckpt"), &outcome.params)?;
    write_loss_curve(&outcome.losses, out.join("loss.txt"))?;
    let sm = smoothed(&outcome.losses, t.smoothing_window);
    let w = t.smoothing_window.min(sm.len());
    write_json(
        &out.join("summary.json"),
        &json!({
            "seed": t.seed,
            "ablation": t.ablation,
            "iterations": t.iterations,
            "smoothed_start": sm[w - 1],
            "smoothed_end": sm[sm.len() - 1],
        }),
    )?;
    Ok(outcome.params)
}

/// Reads a checkpoint and checks it against the configured model layout.
pub fn load_checkpoint(path: &Path, model: &ModelConfig) -> Result<ParamSet<f32>, CliError> {
    let params: ParamSet<f32> = read_checkpoint(path)?;
    let want = init_params::<f32>(model, 0)?;
    let layout = |p: &ParamSet<f32>| p.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
    if layout(&params) != layout(&want) {
        return Err(CliError::config(format!(
            "checkpoint {} does not match the model config",
            path.display()
        )));
    }
    Ok(params)
}

fn load_sample(manifest: &Path, model: &ModelConfig) -> Result<(Manifest, EvalSample), CliError> {
    let (m, dir) = Manifest::load(manifest)?;
    if m.spec.shutter_frames != model.shutter_frames {
        return Err(CliError::config(format!(
            "manifest has S={} but model.shutter_frames={}",
            m.spec.shutter_frames, model.shutter_frames
        )));
    }
    let stream = read_events(dir.join(&m.events))?;
    let i0 = Frame::read_frm(dir.join(&m.blurry[0]))?;
    let i1 = Frame::read_frm(dir.join(&m.blurry[1]))?;
    let latents = m
        .latent
        .iter()
        .map(|l| Frame::read_frm(dir.join(&l.file)))
        .collect::<Result<Vec<_>, _>>()?;
    let e_n = shutter_stack(model, &stream, &m.spec)?;
    let sample = EvalSample {
        i0,
        i1,
        stream,
        spec: m.spec.clone(),
        e_n,
        latents,
    };
    Ok((m, sample))
}

#[derive(Clone, Debug)]
pub struct InterpArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    /// Defaults to every latent time of the shutter period.
    pub taus: Option<Vec<f64>>,
    pub ablation: Ablation,
}

pub fn interp(cfg: &RunConfig, args: &InterpArgs, out: &Path) -> Result<Vec<f64>, CliError> {
    cfg.validate()?;
    let params = load_checkpoint(&args.checkpoint, &cfg.model)?;
    let (m, s) = load_sample(&args.manifest, &cfg.model)?;
    let taus = args
        .taus
        .clone()
        .unwrap_or_else(|| (0..s.spec.latent_count()).map(|i| s.spec.latent_time(i)).collect());
    prepare_out(out, cfg)?;
    let frames = interpolate(&params, &cfg.model, &s.i0, &s.i1, &s.stream, &s.spec, &taus, args.ablation)?;
    let mut rows = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        write_frame(out, &format!("frame_{i:03}"), &f.frame)?;
        f.omega.write_pgm(out.join(format!("omega_{i:03}.pgm")))?;
        let score = m
            .latent_at(f.tau)
            .map(|l| psnr(&f.frame, &s.latents[l.index]))
            .transpose()?;
        rows.push(json!({
            "tau": f.tau,
            "frame": format!("frame_{i:03}.frm"),
            "mean_omega": f.omega.mean(),
            "psnr_db": score,
        }));
    }
    write_json(&out.join("interp.json"), &json!({ "ablation": args.ablation, "outputs": rows }))?;
    Ok(taus)
}

#[derive(Clone, Debug)]
pub struct AnalyzeArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    /// Saliency target; defaults to the middle of the shutter period.
    pub tau: Option<f64>,
    pub ablation: Ablation,
}

/// Per-bin saliency at one target plus the importance-map sweep over every
/// latent time.
pub fn analyze(cfg: &RunConfig, args: &AnalyzeArgs, out: &Path) -> Result<Vec<f64>, CliError> {
    cfg.validate()?;
    let params = load_checkpoint(&args.checkpoint, &cfg.model)?;
    let (_, s) = load_sample(&args.manifest, &cfg.model)?;
    let tau = args.tau.unwrap_or_else(|| s.spec.latent_time(cfg.model.shutter_frames));
    let input = s.input::<f32>(&cfg.model, tau)?;
    prepare_out(out, cfg)?;
    let scores = saliency(&params, &cfg.model, &input, args.ablation)?;
    write_json(
        &out.join("saliency.json"),
        &json!({
            "tau": tau,
            "tau_norm": input.tau_norm,
            "ablation": args.ablation,
            "bins": scores.len(),
            "scores": scores,
        }),
    )?;
    let taus: Vec<f64> = (0..s.spec.latent_count()).map(|i| s.spec.latent_time(i)).collect();
    let sweep = omega_sweep(&params, &cfg.model, &s, &taus, args.ablation)?;
    let mut points = Vec::with_capacity(sweep.len());
    for (i, (p, map)) in sweep.into_iter().enumerate() {
        map.write_pgm(out.join(format!("omega_{i:03}.pgm")))?;
        points.push(p);
    }
    write_json(&out.join("omega.json"), &points)?;
    Ok(scores)
}

/// Parses `variant=path` or a bare path (the `full` checkpoint).
pub fn parse_checkpoint_arg(arg: &str) -> Result<(Ablation, PathBuf), CliError> {
    match arg.split_once('=') {
        Some((v, p)) => Ok((v.parse().map_err(CliError::config)?, PathBuf::from(p))),
        None => Ok((Ablation::Full, PathBuf::from(arg))),
    }
}

/// Ablation comparison on the configured held-out set.
pub fn eval(
    cfg: &RunConfig,
    checkpoints: &[(Ablation, PathBuf)],
    threads: usize,
    out: &Path,
) -> Result<String, CliError> {
    cfg.validate()?;
    let mut loaded = HashMap::new();
    for (v, p) in checkpoints {
        loaded.insert(*v, load_checkpoint(p, &cfg.model)?);
    }
    let e = &cfg.eval;
    let set = make_eval_set(&e.scene, &cfg.model, e.size, e.exposure, e.samples, e.seed)?;
    let reports = run_ablation_suite(&loaded, &cfg.model, &set, &e.variants, e.seed, threads)?;
    prepare_out(out, cfg)?;
    write_json(&out.join("eval.json"), &reports)?;
    let table = ablation_table(&reports);
    write_text(&out.join("ablation.txt"), &table)?;
    Ok(table)
}
