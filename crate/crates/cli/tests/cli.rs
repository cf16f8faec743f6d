use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evfi::frame::Frame;
use evfi::net::Ablation;
use evfi::pipeline::{saliency, EvalSample};
use evfi_cli::commands::{load_checkpoint, Manifest};
use evfi_cli::RunConfig;
use serde_json::Value;

const TINY: &str = r#"{
  "sim": {"height": 32, "width": 32},
  "model": {"channels": 4, "event_bins": 4, "tau_bins": 2, "key_dim": 4},
  "train": {"iterations": 3, "crop_size": 16},
  "eval": {"samples": 1, "size": 16}
}"#;

fn evfi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evfi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn simulate_defaults_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = evfi(&["simulate", "--seed", "5", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let m = json(&a.join("manifest.json"));
    assert_eq!(m["spec"]["shutter_frames"], 10);
    assert_eq!(m["latent"].as_array().unwrap().len(), 20);
    assert_eq!(m["m"].as_array().unwrap().len(), 2);
    assert_eq!(json(&a.join("config.json"))["sim"]["seed"], 5);
    assert!(a.join("events.evt").exists() && a.join("blurry_1.pgm").exists());
    assert_eq!(files(&a), files(&b));
}

#[test]
fn invalid_pattern_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"sim": {"pattern": "spiral"}}"#).unwrap();
    let o = evfi(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sim.pattern"));
    let missing = evfi(&["simulate", "--config", s(&dir.path().join("nope.json"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn edi_round_trip_and_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sym.json");
    fs::write(&cfg, r#"{"sim": {"exposure": {"symmetric": 9}}}"#).unwrap();
    let sim = dir.path().join("sim");
    assert!(evfi(&["simulate", "--config", s(&cfg), "--out", s(&sim)]).status.success());
    let manifest = sim.join("manifest.json");

    let o = evfi(&["reconstruct-edi", "--manifest", s(&manifest), "--tau", "0.045", "--out", s(&dir.path().join("e"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = String::from_utf8_lossy(&o.stdout).to_string();
    let db: f64 = line.trim().strip_prefix("psnr_db ").unwrap().parse().unwrap();
    assert!(db >= 30.0, "{line}");

    let outside = evfi(&["reconstruct-edi", "--manifest", s(&manifest), "--tau", "0.15", "--out", s(&dir.path().join("f"))]);
    assert!(outside.status.success());
    assert!(dir.path().join("f/edi.frm").exists());

    let empty = dir.path().join("empty.evt");
    let stream = evfi::events::EventStream::empty(64, 64, 0.0, 0.2).unwrap();
    evfi::events::write_events(&stream, &empty).unwrap();
    let g = dir.path().join("g");
    let o = evfi(&[
        "reconstruct-edi", "--manifest", s(&manifest), "--events", s(&empty), "--tau", "0.03", "--out", s(&g),
    ]);
    assert!(o.status.success());
    let blurry = Frame::read_frm(sim.join("blurry_0.frm")).unwrap();
    assert_eq!(Frame::read_frm(g.join("edi.frm")).unwrap(), blurry);

    let o = evfi(&["reconstruct-edi", "--manifest", s(&dir.path().join("none.json")), "--tau", "0.03"]);
    assert_eq!(o.status.code(), Some(2));
}

fn train_tiny(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let cfg = tiny_config(dir);
    let mut args = vec!["train", "--config", s(&cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = evfi(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_tiny(dir.path(), "a", &["--seed", "2"]);
    let b = train_tiny(dir.path(), "b", &["--seed", "2"]);
    assert_eq!(files(&a), files(&b));
    let loss = fs::read_to_string(a.join("loss.txt")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    assert_eq!(json(&a.join("summary.json"))["seed"], 2);
}

#[test]
fn nan_loss_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("hot.json");
    let mut v: Value = serde_json::from_str(TINY).unwrap();
    v["train"]["lr"] = 1e30.into();
    v["train"]["iterations"] = 20.into();
    fs::write(&cfg, v.to_string()).unwrap();
    let o = evfi(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}

#[test]
fn interp_analyze_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let ckpt = train_tiny(d, "train", &[]).join("model.ckpt");
    let sim = d.join("sim");
    assert!(evfi(&["simulate", "--config", s(&cfg), "--out", s(&sim)]).status.success());
    let manifest = sim.join("manifest.json");

    let out = d.join("interp");
    let o = evfi(&[
        "interp", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--tau", "0.02,0.1,0.17",
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..3 {
        let f = Frame::read_frm(out.join(format!("frame_{i:03}.frm"))).unwrap();
        assert_eq!(f.shape(), (32, 32));
        assert!(f.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(json(&out.join("interp.json"))["outputs"].as_array().unwrap().len(), 3);
    let o = evfi(&[
        "interp", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--tau", "0.5",
        "--out", s(&d.join("bad")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let out = d.join("analyze");
    let o = evfi(&[
        "analyze", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--tau", "0.07",
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sal = json(&out.join("saliency.json"));
    let scores: Vec<f64> = serde_json::from_value(sal["scores"].clone()).unwrap();
    assert_eq!(scores.len(), 4);
    let model = RunConfig::load(Some(&cfg)).unwrap().model;
    let params = load_checkpoint(&ckpt, &model).unwrap();
    let (m, base) = Manifest::load(&manifest).unwrap();
    let stream = evfi::events::read_events(base.join(&m.events)).unwrap();
    let sample = EvalSample {
        i0: Frame::read_frm(base.join(&m.blurry[0])).unwrap(),
        i1: Frame::read_frm(base.join(&m.blurry[1])).unwrap(),
        e_n: evfi::net::shutter_stack(&model, &stream, &m.spec).unwrap(),
        stream,
        spec: m.spec.clone(),
        latents: vec![],
    };
    let direct = saliency(&params, &model, &sample.input::<f32>(&model, 0.07).unwrap(), Ablation::Full).unwrap();
    assert_eq!(scores, direct);
    assert!(out.join("omega_019.pgm").exists());
    assert_eq!(json(&out.join("omega.json")).as_array().unwrap().len(), 20);

    let fixed = train_tiny(d, "fixed", &[]).join("model.ckpt");
    let out = d.join("eval");
    let fixed_arg = format!("fixed_omega={}", s(&fixed));
    let o = evfi(&[
        "eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--checkpoint", &fixed_arg, "--threads", "2", "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reports = json(&out.join("eval.json"));
    let names: Vec<&str> = reports.as_array().unwrap().iter().map(|r| r["ablation"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "fixed_omega", "swap_omega"]);
    assert_eq!(fs::read_to_string(out.join("ablation.txt")).unwrap().lines().count(), 4);

    let o = evfi(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&d.join("e2"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fixed_omega"));
}

#[test]
fn mismatched_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "t", &[]).join("model.ckpt");
    let sim = dir.path().join("sim");
    assert!(evfi(&["simulate", "--out", s(&sim)]).status.success());
    let o = evfi(&[
        "interp", "--checkpoint", s(&ckpt), "--manifest", s(&sim.join("manifest.json")), "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.path().join("junk.ckpt"), b"nope").unwrap();
    let cfg = tiny_config(dir.path());
    let o = evfi(&[
        "interp", "--config", s(&cfg), "--checkpoint", s(&dir.path().join("junk.ckpt")), "--manifest",
        s(&sim.join("manifest.json")), "--out", s(&dir.path().join("p")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
