use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelInput, NetError};
use crate::tensor::{positional_encoding, ParamSet, Scalar, Tape, Tensor, Var};

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// `omega` forced to 0.5.
    FixedOmega,
    /// `omega` and `1 - omega` exchanged in the blend.
    SwapOmega,
    /// Event channels are not gated by the correlation score.
    NoSampling,
    /// No positional encoding of `tau` inside event sampling.
    NoTauInTes,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::FixedOmega,
        Ablation::SwapOmega,
        Ablation::NoSampling,
        Ablation::NoTauInTes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::FixedOmega => "fixed_omega",
            Ablation::SwapOmega => "swap_omega",
            Ablation::NoSampling => "no_sampling",
            Ablation::NoTauInTes => "no_tau_in_tes",
        }
    }

    /// Whether the variant needs its own trained weights.
    pub fn retrained(self) -> bool {
        self != Ablation::SwapOmega
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}"))
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub frame: Var,
    pub omega: Var,
    pub score0: Var,
    pub score1: Var,
    pub sampled0: Var,
    pub sampled1: Var,
    pub e_n: Var,
}

/// Parameters plus config; every layer registers its weights on the tape it
/// is given, so shared encoders resolve to the same variables.
pub struct Net<'a, T> {
    pub params: &'a ParamSet<T>,
    pub cfg: &'a ModelConfig,
}

/// Blend weights `(omega, 1 - omega)` of `(F0, F1)`.
pub fn omega_weights<T: Scalar>(tape: &mut Tape<T>, omega: Var) -> Result<(Var, Var), NetError> {
    let rest = tape.affine(omega, -T::one(), T::one())?;
    Ok((omega, rest))
}

/// Intensities are clamped this far inside (0, 1) before taking logits.
pub const LOGIT_MARGIN: f64 = 1e-3;

/// Elementwise `ln(p / (1 - p))` of a clamped intensity image.
pub fn logit_image<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |i| {
        let p = x.data()[i].to_f64().unwrap().clamp(LOGIT_MARGIN, 1.0 - LOGIT_MARGIN);
        T::of((p / (1.0 - p)).ln())
    })
}

/// Exchanges the roles of the two blend weights.
pub fn swap_weights((w0, w1): (Var, Var)) -> (Var, Var) {
    (w1, w0)
}

/// `w0 * f0 + w1 * f1`; single-channel weights broadcast over features.
pub fn blend<T: Scalar>(tape: &mut Tape<T>, f0: Var, f1: Var, (w0, w1): (Var, Var)) -> Result<Var, NetError> {
    let a = tape.mul(f0, w0)?;
    let b = tape.mul(f1, w1)?;
    Ok(tape.add(a, b)?)
}

impl<'a, T: Scalar> Net<'a, T> {
    pub fn new(params: &'a ParamSet<T>, cfg: &'a ModelConfig) -> Self {
        Self { params, cfg }
    }

    fn weight(&self, tape: &mut Tape<T>, name: &str) -> Result<Var, NetError> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| NetError::MissingParam(name.to_string()))?;
        Ok(tape.param(name, t)?)
    }

    /// Same-size convolution with weights `{prefix}.w` and bias `{prefix}.b`.
    fn conv(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var, NetError> {
        let w = self.weight(tape, &format!("{prefix}.w"))?;
        let b = self.weight(tape, &format!("{prefix}.b"))?;
        let k = tape.value(w).shape()[2];
        Ok(tape.conv2d(x, w, b, 1, k / 2)?)
    }

    /// `x + conv_a(x) * sigmoid(conv_g(x))`.
    fn gated(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var, NetError> {
        let a = self.conv(tape, &format!("{prefix}.a"), x)?;
        let g = self.conv(tape, &format!("{prefix}.g"), x)?;
        let g = tape.sigmoid(g)?;
        let ag = tape.mul(a, g)?;
        Ok(tape.add(x, ag)?)
    }

    fn pe(&self, tape: &mut Tape<T>, tau_norm: f64, channels: usize) -> Result<Var, NetError> {
        let pe = positional_encoding::<T>(tau_norm, channels)?;
        Ok(tape.input(pe)?)
    }

    /// Feature pyramid: level 0 at input resolution, each further level one
    /// gated block after a 2x average pool.
    pub fn encode(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Vec<Var>, NetError> {
        let mut levels = vec![self.conv(tape, &format!("{prefix}.stem"), x)?];
        for l in 1..=self.cfg.levels {
            let d = tape.downsample2x(levels[l - 1])?;
            levels.push(self.gated(tape, &format!("{prefix}.l{l}"), d)?);
        }
        Ok(levels)
    }

    /// Target-adaptive event sampling against one frame's features. Returns
    /// the sampled event representation and the per-channel score.
    pub fn tes_forward(
        &self,
        tape: &mut Tape<T>,
        event_feat: Var,
        frame_feat: Var,
        tau_norm: f64,
        ablation: Ablation,
    ) -> Result<(Var, Var), NetError> {
        let f_en = if ablation == Ablation::NoTauInTes {
            event_feat
        } else {
            let pe = self.pe(tape, tau_norm, self.cfg.channels)?;
            tape.add_channels(event_feat, pe)?
        };
        let ni = tape.l2norm_channels(frame_feat)?;
        let ne = tape.l2norm_channels(f_en)?;
        let corr = tape.mul(ni, ne)?;
        let corr = tape.sigmoid(corr)?;
        let score = tape.gap(corr)?;
        let gated = if ablation == Ablation::NoSampling {
            f_en
        } else {
            tape.scale_channels(f_en, score)?
        };
        Ok((self.conv(tape, "tes.post", gated)?, score))
    }

    /// Cross-gated fusion at pyramid level `level`:
    /// `f * sigmoid(conv_e(e)) + e * sigmoid(conv_f(f))`.
    pub fn fuse(&self, tape: &mut Tape<T>, level: usize, frame_feat: Var, event_feat: Var) -> Result<Var, NetError> {
        let ge = self.conv(tape, &format!("fuse.l{level}.e"), event_feat)?;
        let ge = tape.sigmoid(ge)?;
        let gf = self.conv(tape, &format!("fuse.l{level}.f"), frame_feat)?;
        let gf = tape.sigmoid(gf)?;
        let a = tape.mul(frame_feat, ge)?;
        let b = tape.mul(event_feat, gf)?;
        Ok(tape.add(a, b)?)
    }

    /// Channel attention from `query` features to the tau-centered features.
    /// Returns `(attended, attention)`; each attention row sums to one.
    fn attend(&self, tape: &mut Tape<T>, query: Var, key: Var, value: Var) -> Result<(Var, Var), NetError> {
        let d = self.cfg.key_dim;
        let shape = tape.value(query).shape().to_vec();
        let hw = shape[1] * shape[2];
        let q = tape.reshape(query, &[d, hw])?;
        let k = tape.reshape(key, &[d, hw])?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, T::of(1.0 / (d as f64).sqrt()))?;
        let attn = tape.softmax(logits, 1)?;
        let v = tape.reshape(value, &[d, hw])?;
        let out = tape.matmul(attn, v)?;
        Ok((tape.reshape(out, &shape)?, attn))
    }

    /// Importance map from both sampled event representations and the
    /// tau-centered stack features. Also returns both attention matrices.
    pub fn tim_forward(
        &self,
        tape: &mut Tape<T>,
        s0: Var,
        s1: Var,
        tau_feat: Var,
        tau_norm: f64,
    ) -> Result<(Var, [Var; 2]), NetError> {
        let key = self.conv(tape, "tim.k", tau_feat)?;
        let value = self.conv(tape, "tim.v", tau_feat)?;
        let q0 = self.conv(tape, "tim.q", s0)?;
        let q1 = self.conv(tape, "tim.q", s1)?;
        let (a0, p0) = self.attend(tape, q0, key, value)?;
        let (a1, p1) = self.attend(tape, q1, key, value)?;
        let cat = tape.concat_channels(a0, a1)?;
        let pe = self.pe(tape, tau_norm, 2 * self.cfg.key_dim)?;
        let cat = tape.add_channels(cat, pe)?;
        let h = self.conv(tape, "tim.c1", cat)?;
        let g = tape.sigmoid(h)?;
        let h = tape.mul(h, g)?;
        let o = self.conv(tape, "tim.c2", h)?;
        Ok((tape.sigmoid(o)?, [p0, p1]))
    }

    /// Decodes blended bottleneck features with blended skips (index = level)
    /// into a `1 x H x W` frame in (0, 1). When given, `base` is a full
    /// resolution logit image that the decoder output refines.
    pub fn decode(
        &self,
        tape: &mut Tape<T>,
        fhat: Var,
        skips: &[Var],
        base: Option<Var>,
        tau_norm: f64,
    ) -> Result<Var, NetError> {
        let pe = self.pe(tape, tau_norm, self.cfg.channels)?;
        let y = tape.add_channels(fhat, pe)?;
        let mut y = self.gated(tape, "dec.mid", y)?;
        for l in (0..self.cfg.levels).rev() {
            let up = tape.upsample2x(y)?;
            let cat = tape.concat_channels(up, skips[l])?;
            y = self.conv(tape, &format!("dec.l{l}.merge"), cat)?;
            if l > 0 {
                y = self.gated(tape, &format!("dec.l{l}"), y)?;
            }
        }
        let y = self.gated(tape, "dec.refine", y)?;
        let mut o = self.conv(tape, "dec.out", y)?;
        if let Some(b) = base {
            o = tape.add(o, b)?;
        }
        Ok(tape.sigmoid(o)?)
    }

    fn check_input(&self, input: &ModelInput<T>) -> Result<(), NetError> {
        let (h, w) = (input.height(), input.width());
        self.cfg.check_dims(h, w)?;
        for (what, t, c) in [
            ("I0", &input.i0, 1),
            ("I1", &input.i1, 1),
            ("E_N", &input.e_n, self.cfg.event_bins),
            ("E_tau", &input.e_tau, self.cfg.tau_bins),
        ] {
            if t.shape() != [c, h, w] {
                return Err(NetError::InputShape {
                    what,
                    got: t.shape().to_vec(),
                    want: vec![c, h, w],
                });
            }
        }
        if !(0.0..=1.0).contains(&input.tau_norm) {
            return Err(NetError::TauOutsideShutter {
                tau: input.tau_norm,
                start: 0.0,
                end: 1.0,
            });
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<T>, input: &ModelInput<T>, ablation: Ablation) -> Result<Forward, NetError> {
        self.check_input(input)?;
        let e_n = tape.input(input.e_n.clone())?;
        let e_tau = tape.input(input.e_tau.clone())?;
        self.forward_vars(tape, input, e_n, e_tau, ablation)
    }

    /// Forward pass with the two event stacks already on the tape.
    pub fn forward_vars(
        &self,
        tape: &mut Tape<T>,
        input: &ModelInput<T>,
        e_n: Var,
        e_tau: Var,
        ablation: Ablation,
    ) -> Result<Forward, NetError> {
        let top = self.cfg.levels;
        let tau = input.tau_norm;
        let i0 = tape.input(input.i0.clone())?;
        let i1 = tape.input(input.i1.clone())?;
        let f0 = self.encode(tape, "frame_enc", i0)?;
        let f1 = self.encode(tape, "frame_enc", i1)?;
        let fe = self.encode(tape, "event_enc", e_n)?;
        let ft = self.encode(tape, "tau_enc", e_tau)?;

        let (s0, score0) = self.tes_forward(tape, fe[top], f0[top], tau, ablation)?;
        let (s1, score1) = self.tes_forward(tape, fe[top], f1[top], tau, ablation)?;
        let big0 = self.fuse(tape, top, f0[top], s0)?;
        let big1 = self.fuse(tape, top, f1[top], s1)?;

        let omega = if ablation == Ablation::FixedOmega {
            let shape = tape.value(big0).shape().to_vec();
            tape.input(Tensor::full(&[1, shape[1], shape[2]], T::of(0.5)))?
        } else {
            self.tim_forward(tape, s0, s1, ft[top], tau)?.0
        };
        let swap = ablation == Ablation::SwapOmega;
        let weights = |tape: &mut Tape<T>, om: Var| -> Result<(Var, Var), NetError> {
            let w = omega_weights(tape, om)?;
            Ok(if swap { swap_weights(w) } else { w })
        };
        let w = weights(tape, omega)?;
        let fhat = blend(tape, big0, big1, w)?;

        let mut scaled = vec![omega; top + 1];
        for l in (0..top).rev() {
            scaled[l] = tape.upsample2x(scaled[l + 1])?;
        }
        let mut skips = Vec::with_capacity(top);
        for l in 0..top {
            let k0 = self.fuse(tape, l, f0[l], fe[l])?;
            let k1 = self.fuse(tape, l, f1[l], fe[l])?;
            let w = weights(tape, scaled[l])?;
            skips.push(blend(tape, k0, k1, w)?);
        }
        let l0 = tape.input(logit_image(&input.i0))?;
        let l1 = tape.input(logit_image(&input.i1))?;
        let w = weights(tape, scaled[0])?;
        let base = blend(tape, l0, l1, w)?;
        let frame = self.decode(tape, fhat, &skips, Some(base), tau)?;
        Ok(Forward {
            frame,
            omega,
            score0,
            score1,
            sampled0: s0,
            sampled1: s1,
            e_n,
        })
    }
}
