use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::tensor::{ParamSet, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let mut zeros = ParamSet::new();
        for (name, t) in params.iter() {
            zeros.insert(name, Tensor::zeros(t.shape())).unwrap();
        }
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    hp: &AdamWConfig,
) -> Result<(), PipelineError> {
    for (name, p) in params.iter() {
        let shape_of = |set: &ParamSet<T>| set.get(name).map(|t| t.shape().to_vec());
        let want = Some(p.shape().to_vec());
        if shape_of(grads) != want || shape_of(&state.m) != want || shape_of(&state.v) != want {
            return Err(PipelineError::ShapeMismatch(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (hp.beta1, hp.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = grads.get(&name).unwrap().data();
        let m = state.m.get_mut(&name).unwrap().data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = T::of(b1 * mi.to_f64().unwrap() + (1.0 - b1) * gi.to_f64().unwrap());
        }
        let v = state.v.get_mut(&name).unwrap().data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            let gi = gi.to_f64().unwrap();
            *vi = T::of(b2 * vi.to_f64().unwrap() + (1.0 - b2) * gi * gi);
        }
        let m = state.m.get(&name).unwrap().data();
        let v = state.v.get(&name).unwrap().data();
        let p = params.get_mut(&name).unwrap().data_mut();
        for ((pi, &mi), &vi) in p.iter_mut().zip(m).zip(v) {
            let m_hat = mi.to_f64().unwrap() / bc1;
            let v_hat = vi.to_f64().unwrap() / bc2;
            let pv = pi.to_f64().unwrap();
            *pi = T::of(pv - lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * pv));
        }
    }
    Ok(())
}

/// Cosine annealing from `lr0` at step 0 to zero at `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64, PipelineError> {
    if total == 0 || step > total {
        return Err(PipelineError::Config(format!(
            "schedule step {step} outside [0, {total}]"
        )));
    }
    let frac = step as f64 / total as f64;
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
