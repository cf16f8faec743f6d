use evfi::edi::{edi_reconstruct, EdiConfig};
use evfi::events::{read_events, write_events};
use evfi::frame::Frame;
use evfi::metrics::psnr;
use evfi::net::verify::small_config;
use evfi::net::{init_params, predict, shutter_stack, Ablation, ModelInput};
use evfi::pipeline::{evaluate, make_eval_set, train_toy, EvalConfig, TrainConfig};
use evfi::sim::{generate_events, make_scene, synth_blur, ExposureSpec, Pattern, SimConfig};
use evfi::tensor::{read_checkpoint, write_checkpoint, ParamSet};

#[test]
fn simulated_files_feed_edi_and_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let seq = make_scene(Pattern::Bars, 32, 32, 20, (0.8, -0.4), 3).unwrap();
    let stream = generate_events(&seq, &SimConfig::default()).unwrap();
    let spec = ExposureSpec::from_lengths(10, seq.dt, [7, 4]).unwrap();
    let [e0, e1] = spec.exposures;
    let b0 = synth_blur(&seq, e0.first, e0.last).unwrap();
    let b1 = synth_blur(&seq, e1.first, e1.last).unwrap();

    write_events(&stream, dir.path().join("ev.evt")).unwrap();
    b0.write_frm(dir.path().join("b0.frm")).unwrap();
    let stream = read_events(dir.path().join("ev.evt")).unwrap();
    let b0 = Frame::read_frm(dir.path().join("b0.frm")).unwrap();

    let cfg = EdiConfig::new(0.2, e0.m);
    for i in e0.first..=e0.last {
        let rec = edi_reconstruct(&b0, &stream, e0.t_s, e0.t_e, seq.timestamp(i), &cfg).unwrap();
        assert!(psnr(&rec, &seq.frames[i]).unwrap() >= 30.0);
    }

    let model = small_config();
    let params: ParamSet<f32> = init_params(&model, 1).unwrap();
    assert_eq!(shutter_stack(&model, &stream, &spec).unwrap().bins, model.event_bins);
    for i in 0..spec.latent_count() {
        let input = ModelInput::<f32>::from_events(&model, &b0, &b1, &stream, &spec, spec.latent_time(i)).unwrap();
        let out = predict(&params, &model, &input, Ablation::Full).unwrap();
        assert_eq!(out.frame.shape(), (32, 32));
        assert!(out.frame.data.iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(out.omega.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn trained_checkpoint_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_config();
    let cfg = TrainConfig {
        iterations: 4,
        crop_size: 16,
        ..TrainConfig::default()
    };
    let out = train_toy(&model, &cfg, None).unwrap();
    let path = dir.path().join("m.ckpt");
    write_checkpoint(&path, &out.params).unwrap();
    let back: ParamSet<f32> = read_checkpoint(&path).unwrap();

    let ec = EvalConfig {
        samples: 2,
        size: 16,
        ..EvalConfig::default()
    };
    let set = make_eval_set(&ec.scene, &model, ec.size, ec.exposure, ec.samples, ec.seed).unwrap();
    let a = evaluate(&out.params, &model, &set, Ablation::Full, ec.seed, 1).unwrap();
    let b = evaluate(&back, &model, &set, Ablation::Full, ec.seed, 1).unwrap();
    assert_eq!(a.psnr, b.psnr);
    assert_eq!(a.per_tau.len(), 2 * model.shutter_frames);
}
