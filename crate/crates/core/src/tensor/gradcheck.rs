//! Central-difference oracle and the per-op gradient sweep built on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{invalid, Scalar, Tape, Tensor, TensorError, Var};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_diff<T: Scalar, E: From<TensorError>>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T, E>,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>, E> {
    if !(h > T::zero()) {
        return Err(invalid("finite_diff", "step must be positive").into());
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe)?;
        probe.data[i] = orig - h;
        let down = f(&probe)?;
        probe.data[i] = orig;
        out.push((up - down) / (h + h));
    }
    Ok(Tensor::new(x.shape.clone(), out)?)
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_error length mismatch");
    let sq = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
    let diff = sq(&mut a.iter().zip(b).map(|(x, y)| x.to_f64().unwrap() - y.to_f64().unwrap()));
    let na = sq(&mut a.iter().map(|x| x.to_f64().unwrap()));
    let nb = sq(&mut b.iter().map(|x| x.to_f64().unwrap()));
    diff / na.max(nb).max(1e-8)
}

/// Evaluates `build` on fresh tapes and compares the analytic gradient of
/// every input against central differences. Returns the worst relative error.
pub fn gradient_check<F, E>(inputs: &[Tensor<f64>], build: F, h: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars = ins.iter().map(|t| tape.input(t.clone())).collect::<Result<Vec<_>, _>>()?;
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss);
        v.item().ok_or_else(|| TensorError::NonScalarLoss(v.shape.clone()).into())
    };
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.input(t.clone())).collect::<Result<Vec<_>, _>>()?;
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).unwrap();
        let numeric = finite_diff(
            |xi| {
                let mut ins = inputs.to_vec();
                ins[i] = xi.clone();
                eval(&ins)
            },
            x,
            h,
        )?;
        worst = worst.max(rel_error(analytic.data(), numeric.data()));
    }
    Ok(worst)
}

/// Outcome of checking one op over several random shapes.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel: f64,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(out * r)` with `r` uniform in [-1, 1) from `seed`, so every output
/// entry carries a distinct upstream gradient.
pub fn random_projection(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = normal(&mut rng, tape.value(out).shape());
    let r = tape.input(r)?;
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

/// Finite-difference check of every differentiable op on `trials` random
/// shapes each (f64, step 1e-5).
pub fn check_all_ops(seed: u64, trials: usize) -> Result<Vec<OpCheck>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut report = Vec::new();
    let ops: &[&'static str] = &[
        "conv2d",
        "add",
        "add_broadcast",
        "sub",
        "mul",
        "mul_broadcast",
        "affine",
        "sigmoid",
        "exp",
        "concat_channels",
        "softmax",
        "gap",
        "l2norm_channels",
        "matmul",
        "transpose",
        "reshape",
        "downsample2x",
        "upsample2x",
        "scale_channels",
        "add_channels",
        "sum",
        "mean",
        "charbonnier",
    ];
    for &op in ops {
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let c = rng.random_range(1..=4usize);
            let h2 = 2 * rng.random_range(1..=3usize);
            let w2 = 2 * rng.random_range(1..=3usize);
            let pseed = rng.random::<u64>();
            let chw = [c, h2, w2];
            let (inputs, build): (Vec<Tensor<f64>>, Builder) = match op {
                "conv2d" => {
                    let k = [1, 3, 5][trial % 3];
                    let stride = 1 + trial % 2;
                    let pad = k / 2;
                    let cout = rng.random_range(1..=3usize);
                    let hh = h2.max(k);
                    let ww = w2.max(k);
                    (
                        vec![
                            normal(&mut rng, &[c, hh, ww]),
                            normal(&mut rng, &[cout, c, k, k]),
                            normal(&mut rng, &[cout]),
                        ],
                        Box::new(move |t, v| {
                            let o = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                            random_projection(t, o, pseed)
                        }),
                    )
                }
                "add" | "sub" | "mul" => (
                    vec![normal(&mut rng, &chw), normal(&mut rng, &chw)],
                    Box::new(move |t, v| {
                        let o = match op {
                            "add" => t.add(v[0], v[1])?,
                            "sub" => t.sub(v[0], v[1])?,
                            _ => t.mul(v[0], v[1])?,
                        };
                        random_projection(t, o, pseed)
                    }),
                ),
                "add_broadcast" | "mul_broadcast" => {
                    let c = c + 1;
                    let (a, b) = if trial % 2 == 0 {
                        ([c, h2, w2], [1, h2, w2])
                    } else {
                        ([1, h2, w2], [c, h2, w2])
                    };
                    (
                        vec![normal(&mut rng, &a), normal(&mut rng, &b)],
                        Box::new(move |t, v| {
                            let o = if op == "add_broadcast" {
                                t.add(v[0], v[1])?
                            } else {
                                t.mul(v[0], v[1])?
                            };
                            random_projection(t, o, pseed)
                        }),
                    )
                }
                "affine" | "sigmoid" | "exp" | "gap" | "l2norm_channels" | "downsample2x" | "upsample2x"
                | "sum" | "mean" => {
                    let x = normal(&mut rng, &chw);
                    let (s, b) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
                    (
                        vec![x],
                        Box::new(move |t, v| {
                            let o = match op {
                                "affine" => t.affine(v[0], s, b)?,
                                "sigmoid" => t.sigmoid(v[0])?,
                                "exp" => t.exp(v[0])?,
                                "gap" => t.gap(v[0])?,
                                "l2norm_channels" => t.l2norm_channels(v[0])?,
                                "downsample2x" => t.downsample2x(v[0])?,
                                "upsample2x" => t.upsample2x(v[0])?,
                                "sum" => t.sum(v[0])?,
                                _ => t.mean(v[0])?,
                            };
                            random_projection(t, o, pseed)
                        }),
                    )
                }
                "concat_channels" => {
                    let c2 = rng.random_range(1..=3usize);
                    (
                        vec![normal(&mut rng, &chw), normal(&mut rng, &[c2, h2, w2])],
                        Box::new(move |t, v| {
                            let o = t.concat_channels(v[0], v[1])?;
                            random_projection(t, o, pseed)
                        }),
                    )
                }
                "softmax" => {
                    let shape: Vec<usize> = match trial % 3 {
                        0 => vec![c + 1, h2 * w2],
                        1 => vec![h2 + 1],
                        _ => chw.to_vec(),
                    };
                    let axis = rng.random_range(0..shape.len());
                    (
                        vec![normal(&mut rng, &shape)],
                        Box::new(move |t, v| {
                            let o = t.softmax(v[0], axis)?;
                            random_projection(t, o, pseed)
                        }),
                    )
                }
                "matmul" => {
                    let (m, k, n) = (c, h2 - 1, w2 + 1);
                    (
                        vec![normal(&mut rng, &[m, k]), normal(&mut rng, &[k, n])],
                        Box::new(move |t, v| {
                            let o = t.matmul(v[0], v[1])?;
                            random_projection(t, o, pseed)
                        }),
                    )
                }
                "transpose" => (
                    vec![normal(&mut rng, &[c + 1, w2])],
                    Box::new(move |t, v| {
                        let o = t.transpose(v[0])?;
                        random_projection(t, o, pseed)
                    }),
                ),
                "reshape" => (
                    vec![normal(&mut rng, &chw)],
                    Box::new(move |t, v| {
                        let o = t.reshape(v[0], &[c, h2 * w2])?;
                        random_projection(t, o, pseed)
                    }),
                ),
                "scale_channels" | "add_channels" => (
                    vec![normal(&mut rng, &chw), normal(&mut rng, &[c])],
                    Box::new(move |t, v| {
                        let o = if op == "scale_channels" {
                            t.scale_channels(v[0], v[1])?
                        } else {
                            t.add_channels(v[0], v[1])?
                        };
                        random_projection(t, o, pseed)
                    }),
                ),
                "charbonnier" => (
                    vec![normal(&mut rng, &chw), normal(&mut rng, &chw)],
                    Box::new(move |t, v| t.charbonnier(v[0], v[1], 1e-6)),
                ),
                _ => unreachable!(),
            };
            worst = worst.max(gradient_check(&inputs, build, h)?);
        }
        report.push(OpCheck {
            op,
            trials,
            max_rel: worst,
        });
    }
    Ok(report)
}
