use serde::{Deserialize, Serialize};

use super::data::EvalSample;
use super::PipelineError;
use crate::net::{predict, Ablation, ModelConfig, ModelInput, Net};
use crate::tensor::{finite_diff, ParamSet, Scalar, Tape, Tensor, Var};

/// `sum` of the sampled event representations for both frames, built on
/// `tape` from an `E_N` variable.
fn sampled_sum<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    input: &ModelInput<T>,
    e_n: Var,
    ablation: Ablation,
) -> Result<Var, PipelineError> {
    let net = Net::new(params, cfg);
    let top = cfg.levels;
    let fe = net.encode(tape, "event_enc", e_n)?;
    let mut total = None;
    for frame in [&input.i0, &input.i1] {
        let x = tape.input(frame.clone())?;
        let f = net.encode(tape, "frame_enc", x)?;
        let (s, _) = net.tes_forward(tape, fe[top], f[top], input.tau_norm, ablation)?;
        let s = tape.sum(s)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    Ok(total.unwrap())
}

/// Gradient of the summed sampled event representation with respect to `E_N`.
pub fn saliency_gradient<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    input: &ModelInput<T>,
    ablation: Ablation,
) -> Result<Tensor<T>, PipelineError> {
    let mut tape = Tape::new();
    let e_n = tape.input(input.e_n.clone())?;
    let loss = sampled_sum(&mut tape, params, cfg, input, e_n, ablation)?;
    let g = tape.backward(loss)?;
    Ok(g.get(e_n).unwrap())
}

/// Central-difference counterpart of [`saliency_gradient`].
pub fn saliency_fd(
    params: &ParamSet<f64>,
    cfg: &ModelConfig,
    input: &ModelInput<f64>,
    ablation: Ablation,
    h: f64,
) -> Result<Tensor<f64>, PipelineError> {
    finite_diff::<f64, PipelineError>(
        |x| {
            let mut tape = Tape::new();
            let e_n = tape.input(x.clone())?;
            let s = sampled_sum(&mut tape, params, cfg, input, e_n, ablation)?;
            Ok(tape.value(s).item().unwrap())
        },
        &input.e_n,
        h,
    )
}

/// Per-bin importance: mean absolute gradient over the pixels of each `E_N`
/// slice.
pub fn saliency<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    input: &ModelInput<T>,
    ablation: Ablation,
) -> Result<Vec<f64>, PipelineError> {
    Ok(bin_means(&saliency_gradient(params, cfg, input, ablation)?))
}

pub(crate) fn bin_means<T: Scalar>(g: &Tensor<T>) -> Vec<f64> {
    let bins = g.shape()[0];
    let plane = g.len() / bins;
    g.data()
        .chunks(plane)
        .map(|c| c.iter().map(|v| v.to_f64().unwrap().abs()).sum::<f64>() / plane as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaPoint {
    pub tau: f64,
    pub tau_norm: f64,
    pub mean_omega: f64,
}

/// Mean importance map value at `tau` for one clip.
pub fn omega_at(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    sample: &EvalSample,
    tau: f64,
    ablation: Ablation,
) -> Result<(OmegaPoint, crate::frame::Frame), PipelineError> {
    let input = sample.input::<f32>(cfg, tau)?;
    let p = predict(params, cfg, &input, ablation)?;
    Ok((
        OmegaPoint {
            tau,
            tau_norm: input.tau_norm,
            mean_omega: p.omega.mean(),
        },
        p.omega,
    ))
}

/// Importance maps for each target time in `taus`.
pub fn omega_sweep(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    sample: &EvalSample,
    taus: &[f64],
    ablation: Ablation,
) -> Result<Vec<(OmegaPoint, crate::frame::Frame)>, PipelineError> {
    taus.iter().map(|&t| omega_at(params, cfg, sample, t, ablation)).collect()
}

/// Mean importance at the centers of the two exposures, averaged over clips.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaTrend {
    pub at_exposure0: f64,
    pub at_exposure1: f64,
}

impl OmegaTrend {
    pub fn favors_first_frame(&self) -> bool {
        self.at_exposure0 > self.at_exposure1
    }
}

pub fn omega_trend(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    set: &[EvalSample],
) -> Result<OmegaTrend, PipelineError> {
    if set.is_empty() {
        return Err(PipelineError::Config("evaluation set is empty".into()));
    }
    let (mut a, mut b) = (0.0, 0.0);
    for s in set {
        let [e0, e1] = s.spec.exposures;
        a += omega_at(params, cfg, s, e0.midpoint(), Ablation::Full)?.0.mean_omega;
        b += omega_at(params, cfg, s, e1.midpoint(), Ablation::Full)?.0.mean_omega;
    }
    let k = set.len() as f64;
    Ok(OmegaTrend {
        at_exposure0: a / k,
        at_exposure1: b / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use crate::net::verify::{random_input, small_config};
    use crate::pipeline::data::{make_eval_set, SceneConfig};
    use crate::sim::ExposureMode;
    use crate::tensor::rel_error;

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = small_config();
        for (seed, ablation) in [(0, Ablation::Full), (1, Ablation::NoTauInTes), (2, Ablation::NoSampling)] {
            let params = init_params::<f64>(&cfg, seed).unwrap();
            let input = random_input(&cfg, 8, 8, 0.4, seed + 10);
            let g = saliency_gradient(&params, &cfg, &input, ablation).unwrap();
            let fd = saliency_fd(&params, &cfg, &input, ablation, 1e-5).unwrap();
            let err = rel_error(g.data(), fd.data());
            assert!(err < 1e-3, "{ablation}: rel err {err}");
            let scores = saliency(&params, &cfg, &input, ablation).unwrap();
            assert_eq!(scores.len(), cfg.event_bins);
            assert_eq!(scores, bin_means(&g));
            let fd_scores = bin_means(&fd);
            assert!(rel_error(&scores, &fd_scores) < 1e-3);
        }
    }

    #[test]
    fn zero_event_encoder_gives_zero_scores() {
        let cfg = small_config();
        let mut params = init_params::<f64>(&cfg, 3).unwrap();
        for (name, t) in params.iter_mut() {
            if name.starts_with("event_enc.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let input = random_input(&cfg, 8, 8, 0.7, 4);
        let scores = saliency(&params, &cfg, &input, Ablation::Full).unwrap();
        assert_eq!(scores, vec![0.0; cfg.event_bins]);
    }

    #[test]
    fn omega_sweep_and_trend() {
        let cfg = small_config();
        let params = init_params::<f32>(&cfg, 0).unwrap();
        let set = make_eval_set(&SceneConfig::default(), &cfg, 16, ExposureMode::Symmetric(5), 2, 1).unwrap();
        let sweep = omega_sweep(&params, &cfg, &set[0], &[0.02, 0.12], Ablation::Full).unwrap();
        assert_eq!(sweep.len(), 2);
        for (p, map) in &sweep {
            assert!(p.mean_omega > 0.0 && p.mean_omega < 1.0);
            assert!((map.mean() - p.mean_omega).abs() < 1e-12);
        }
        assert!((sweep[1].0.tau_norm - 0.6).abs() < 1e-12);
        let trend = omega_trend(&params, &cfg, &set).unwrap();
        assert!(trend.at_exposure0.is_finite() && trend.at_exposure1.is_finite());
        let fixed = omega_at(&params, &cfg, &set[0], 0.05, Ablation::FixedOmega).unwrap();
        assert_eq!(fixed.0.mean_omega, 0.5);
    }
}
