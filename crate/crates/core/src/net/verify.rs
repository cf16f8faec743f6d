//! Finite-difference checks of the network paths, in f64.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{blend, init_params, omega_weights, Ablation, ModelConfig, ModelInput, Net, NetError, CHARBONNIER_EPS};
use crate::tensor::{gradient_check, random_projection, rel_error, ParamSet, Tape, Tensor, Var};

const STEP: f64 = 1e-5;

/// Reduced model used for gradient checks.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        levels: 2,
        event_bins: 4,
        tau_bins: 2,
        key_dim: 4,
        ..ModelConfig::default()
    }
}

/// Random frames in [0.1, 0.9] and integer event counts in [-2, 2].
pub fn random_input(cfg: &ModelConfig, h: usize, w: usize, tau_norm: f64, seed: u64) -> ModelInput<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[1, h, w], |_| rng.random_range(0.1..0.9));
    let i0 = frame(&mut rng);
    let i1 = frame(&mut rng);
    let mut stack = |bins: usize| Tensor::from_fn(&[bins, h, w], |_| rng.random_range(-2i32..=2) as f64);
    ModelInput {
        i0,
        i1,
        e_n: stack(cfg.event_bins),
        e_tau: stack(cfg.tau_bins),
        tau_norm,
    }
}

/// Parameters for gradient checks: the zero-initialised output conv is
/// replaced by random weights so every upstream path carries gradient.
pub fn check_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<f64>, NetError> {
    let mut p = init_params::<f64>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a7);
    for n in ["dec.out.w", "dec.out.b"] {
        p.get_mut(n)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    Ok(p)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Compares backward gradients of up to `coords` randomly chosen parameter
/// entries (among those the loss touches) with central differences.
pub fn param_gradient_check<F>(params: &ParamSet<f64>, coords: usize, seed: u64, build: F) -> Result<f64, NetError>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var, NetError>,
{
    let eval = |p: &ParamSet<f64>| -> Result<f64, NetError> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, p)?;
        Ok(tape.value(loss).item().unwrap())
    };
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let mut entries = Vec::new();
    for name in grads.param_names() {
        let n = params.get(name).map_or(0, Tensor::len);
        entries.extend((0..n).map(|i| (name.to_string(), i)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if entries.len() <= coords {
        (0..entries.len()).collect()
    } else {
        let mut v = sample(&mut rng, entries.len(), coords).into_vec();
        v.sort_unstable();
        v
    };
    let mut analytic = Vec::with_capacity(picks.len());
    let mut numeric = Vec::with_capacity(picks.len());
    let mut probe = params.clone();
    for &k in &picks {
        let (name, i) = &entries[k];
        analytic.push(grads.param(name).unwrap().data()[*i]);
        let orig = params.get(name).unwrap().data()[*i];
        probe.get_mut(name).unwrap().data_mut()[*i] = orig + STEP;
        let up = eval(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[*i] = orig - STEP;
        let down = eval(&probe)?;
        probe.get_mut(name).unwrap().data_mut()[*i] = orig;
        numeric.push((up - down) / (2.0 * STEP));
    }
    Ok(rel_error(&analytic, &numeric))
}

/// Gradient check of one network path against both its inputs and all of its
/// parameters; returns the worse of the two relative errors.
fn path_check<F>(params: &ParamSet<f64>, inputs: &[Tensor<f64>], seed: u64, build: F) -> Result<f64, NetError>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>, &[Var]) -> Result<Var, NetError>,
{
    let wrt_inputs = gradient_check(inputs, |tape, vars| build(tape, params, vars), STEP)?;
    let wrt_params = param_gradient_check(params, usize::MAX, seed, |tape, p| {
        let vars = inputs
            .iter()
            .map(|t| tape.input(t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        build(tape, p, &vars)
    })?;
    Ok(wrt_inputs.max(wrt_params))
}

/// Finite-difference checks of fuse, event sampling (all variants),
/// importance mapping, blending and decoding on the reduced model.
pub fn check_paths(seed: u64) -> Result<Vec<(&'static str, f64)>, NetError> {
    let cfg = small_config();
    let params = check_params(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let c = cfg.channels;
    let (h, w) = (4, 4);
    let feat = [c, h, w];
    let tau = 0.37;
    let mut out = Vec::new();

    let ins = vec![random_tensor(&mut rng, &feat), random_tensor(&mut rng, &feat)];
    out.push((
        "fuse",
        path_check(&params, &ins, seed, |t, p, v| {
            let f = Net::new(p, &cfg).fuse(t, cfg.levels, v[0], v[1])?;
            Ok(random_projection(t, f, 1)?)
        })?,
    ));

    for (name, ablation) in [
        ("tes", Ablation::Full),
        ("tes_no_sampling", Ablation::NoSampling),
        ("tes_no_tau", Ablation::NoTauInTes),
    ] {
        let ins = vec![random_tensor(&mut rng, &feat), random_tensor(&mut rng, &feat)];
        out.push((
            name,
            path_check(&params, &ins, seed, |t, p, v| {
                let (s, score) = Net::new(p, &cfg).tes_forward(t, v[0], v[1], tau, ablation)?;
                let a = random_projection(t, s, 2)?;
                let b = random_projection(t, score, 3)?;
                Ok(t.add(a, b)?)
            })?,
        ));
    }

    let ins = vec![
        random_tensor(&mut rng, &feat),
        random_tensor(&mut rng, &feat),
        random_tensor(&mut rng, &feat),
    ];
    out.push((
        "tim",
        path_check(&params, &ins, seed, |t, p, v| {
            let (omega, _) = Net::new(p, &cfg).tim_forward(t, v[0], v[1], v[2], tau)?;
            Ok(random_projection(t, omega, 4)?)
        })?,
    ));

    let omega = Tensor::from_fn(&[1, h, w], |_| rng.random_range(0.05..0.95));
    let ins = vec![random_tensor(&mut rng, &feat), random_tensor(&mut rng, &feat), omega];
    out.push((
        "blend",
        path_check(&params, &ins, seed, |t, _, v| {
            let wts = omega_weights(t, v[2])?;
            let f = blend(t, v[0], v[1], wts)?;
            Ok(random_projection(t, f, 5)?)
        })?,
    ));

    let (hh, ww) = (h << cfg.levels, w << cfg.levels);
    let mut ins = vec![random_tensor(&mut rng, &feat)];
    for l in 0..cfg.levels {
        ins.push(random_tensor(&mut rng, &[c, hh >> l, ww >> l]));
    }
    ins.push(random_tensor(&mut rng, &[1, hh, ww]));
    out.push((
        "decode",
        path_check(&params, &ins, seed, |t, p, v| {
            let y = Net::new(p, &cfg).decode(t, v[0], &v[1..cfg.levels + 1], Some(v[cfg.levels + 1]), tau)?;
            Ok(random_projection(t, y, 6)?)
        })?,
    ));
    Ok(out)
}

/// Charbonnier loss of the full model on a random 16x16 sample versus a random
/// target; gradients of `coords` random parameters against central
/// differences.
pub fn check_model_end_to_end(seed: u64, coords: usize, ablation: Ablation) -> Result<f64, NetError> {
    let cfg = small_config();
    let params = check_params(&cfg, seed)?;
    let input = random_input(&cfg, 16, 16, 0.61, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let gt = Tensor::from_fn(&[1, 16, 16], |_| rng.random_range(0.0..1.0));
    param_gradient_check(&params, coords, seed + 3, |tape, p| {
        let out = Net::new(p, &cfg).forward(tape, &input, ablation)?;
        let g = tape.input(gt.clone())?;
        Ok(tape.charbonnier(out.frame, g, CHARBONNIER_EPS)?)
    })
}
