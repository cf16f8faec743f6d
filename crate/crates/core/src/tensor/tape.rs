use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;

use super::kernels::{self, ConvGeom};
use super::{invalid, Scalar, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Which operand of a binary op is a single channel broadcast over `C`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    Add { a: usize, b: usize, bcast: Bcast },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize, bcast: Bcast },
    Affine { a: usize, scale: T },
    Sigmoid { a: usize },
    Exp { a: usize },
    Concat { a: usize, b: usize, split: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    Gap { a: usize, plane: usize },
    L2Norm { a: usize, channels: usize, plane: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape { a: usize },
    Down2 { a: usize },
    Up2 { a: usize },
    ScaleChannels { x: usize, s: usize, plane: usize },
    AddChannels { x: usize, v: usize, plane: usize },
    Sum { a: usize },
    Mean { a: usize },
    Charbonnier { pred: usize, gt: usize, eps: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records values and the operations that produced them.
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: IndexMap<String, usize>,
    backward_done: bool,
}

/// Per-node gradients from one backward pass.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: IndexMap<String, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zero when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape || v.idx >= self.shapes.len() {
            return None;
        }
        let shape = &self.shapes[v.idx];
        Some(match &self.grads[v.idx] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).unwrap(),
            None => Tensor::zeros(shape),
        })
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        let &idx = self.params.get(name)?;
        self.get(Var {
            tape: self.tape,
            idx,
        })
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Sums a `C x plane` gradient over channels into a single plane.
fn sum_channels<T: Scalar>(g: &[T], plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); plane];
    for chunk in g.chunks_exact(plane) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o = *o + v);
    }
    out
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const L2_EPS: f64 = 1e-8;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: IndexMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    /// A leaf input (data or constant).
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var, TensorError> {
        self.push("input", value, Op::Leaf)
    }

    /// A named trainable leaf. Registering the same name again returns the
    /// existing variable so shared weights accumulate one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Result<Var, TensorError> {
        if let Some(&idx) = self.params.get(name) {
            return Ok(Var { tape: self.id, idx });
        }
        let v = self.push("param", value.clone(), Op::Leaf)?;
        self.params.insert(name.to_string(), v.idx);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).map(|&idx| Var { tape: self.id, idx })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xs, ws, bs) = (self.val(xi).shape(), self.val(wi).shape(), self.val(bi).shape());
        let shape_err = || TensorError::Shape {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        };
        let (&[cin, h, wd], &[cout, wcin, k, k2]) = (xs, ws) else {
            return Err(shape_err());
        };
        if wcin != cin || k != k2 || bs != [cout] {
            return Err(shape_err());
        }
        if k % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        let geom = ConvGeom::new(cin, cout, h, wd, k, stride, pad)
            .ok_or_else(|| invalid("conv2d", "kernel larger than padded input or zero stride"))?;
        let out = kernels::conv2d_forward(&geom, self.val(xi).data(), self.val(wi).data(), self.val(bi).data());
        let value = Tensor::new(vec![cout, geom.oh, geom.ow], out)?;
        self.push("conv2d", value, Op::Conv2d { x: xi, w: wi, b: bi, geom })
    }

    fn broadcast_kind(&self, op: &'static str, a: usize, b: usize) -> Result<Bcast, TensorError> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa == sb {
            return Ok(Bcast::None);
        }
        match (sa, sb) {
            ([ca, ha, wa], [1, hb, wb]) if ha == hb && wa == wb && *ca > 1 => Ok(Bcast::Rhs),
            ([1, ha, wa], [cb, hb, wb]) if ha == hb && wa == wb && *cb > 1 => Ok(Bcast::Lhs),
            _ => Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            }),
        }
    }

    fn binary(&self, a: usize, b: usize, bcast: Bcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.val(a), self.val(b));
        match bcast {
            Bcast::None => Tensor {
                shape: va.shape.clone(),
                data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
            },
            Bcast::Rhs => {
                let plane = vb.len();
                Tensor {
                    shape: va.shape.clone(),
                    data: va.data.iter().enumerate().map(|(i, &x)| f(x, vb.data[i % plane])).collect(),
                }
            }
            Bcast::Lhs => {
                let plane = va.len();
                Tensor {
                    shape: vb.shape.clone(),
                    data: vb.data.iter().enumerate().map(|(i, &y)| f(va.data[i % plane], y)).collect(),
                }
            }
        }
    }

    /// Elementwise sum; a single-channel operand broadcasts over channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let bcast = self.broadcast_kind("add", ai, bi)?;
        let v = self.binary(ai, bi, bcast, |x, y| x + y);
        self.push("add", v, Op::Add { a: ai, b: bi, bcast })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.val(ai).shape() != self.val(bi).shape() {
            return Err(TensorError::Shape {
                op: "sub",
                lhs: self.val(ai).shape().to_vec(),
                rhs: self.val(bi).shape().to_vec(),
            });
        }
        let v = self.binary(ai, bi, Bcast::None, |x, y| x - y);
        self.push("sub", v, Op::Sub { a: ai, b: bi })
    }

    /// Elementwise product; a single-channel operand broadcasts over channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let bcast = self.broadcast_kind("mul", ai, bi)?;
        let v = self.binary(ai, bi, bcast, |x, y| x * y);
        self.push("mul", v, Op::Mul { a: ai, b: bi, bcast })
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let src = self.val(ai);
        let v = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| scale * x + shift).collect(),
        };
        self.push("affine", v, Op::Affine { a: ai, scale })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        self.affine(a, s, T::zero())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let src = self.val(ai);
        let v = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| sigmoid(x)).collect(),
        };
        self.push("sigmoid", v, Op::Sigmoid { a: ai })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let src = self.val(ai);
        let v = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| x.exp()).collect(),
        };
        self.push("exp", v, Op::Exp { a: ai })
    }

    /// Stacks two `C x H x W` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (self.val(ai), self.val(bi));
        match (va.chw(), vb.chw()) {
            (Some((ca, ha, wa)), Some((cb, hb, wb))) if ha == hb && wa == wb => {
                let mut data = va.data.clone();
                data.extend_from_slice(&vb.data);
                let v = Tensor {
                    shape: vec![ca + cb, ha, wa],
                    data,
                };
                self.push("concat_channels", v, Op::Concat { a: ai, b: bi, split: va.len() })
            }
            _ => Err(TensorError::Shape {
                op: "concat_channels",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            }),
        }
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let src = self.val(ai);
        if axis >= src.rank() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {:?}", src.shape)));
        }
        let outer: usize = src.shape[..axis].iter().product();
        let len = src.shape[axis];
        let inner: usize = src.shape[axis + 1..].iter().product();
        let mut data = src.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..len {
                    m = m.max(data[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (data[at(j)] - m).exp();
                    data[at(j)] = e;
                    s = s + e;
                }
                for j in 0..len {
                    data[at(j)] = data[at(j)] / s;
                }
            }
        }
        let v = Tensor {
            shape: src.shape.clone(),
            data,
        };
        self.push("softmax", v, Op::Softmax { a: ai, outer, len, inner })
    }

    /// Global average pooling `C x H x W -> C`.
    pub fn gap(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let src = self.val(ai);
        let (c, h, w) = src
            .chw()
            .ok_or_else(|| invalid("gap", format!("expected C x H x W, got {:?}", src.shape)))?;
        let plane = h * w;
        if plane == 0 {
            return Err(invalid("gap", "empty spatial extent"));
        }
        let inv = T::one() / T::of(plane as f64);
        let data = src.data.chunks_exact(plane).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let v = Tensor { shape: vec![c], data };
        self.push("gap", v, Op::Gap { a: ai, plane })
    }

    /// Divides each pixel's channel vector by `max(norm, 1e-8)`; the gradient
    /// is taken as zero where the norm is below that floor.
    pub fn l2norm_channels(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let src = self.val(ai);
        let (c, h, w) = src
            .chw()
            .ok_or_else(|| invalid("l2norm_channels", format!("expected C x H x W, got {:?}", src.shape)))?;
        let plane = h * w;
        let eps = T::of(L2_EPS);
        let mut data = src.data.clone();
        for p in 0..plane {
            let n = (0..c).map(|ch| src.data[ch * plane + p].powi(2)).sum::<T>().sqrt().max(eps);
            for ch in 0..c {
                data[ch * plane + p] = data[ch * plane + p] / n;
            }
        }
        let v = Tensor {
            shape: src.shape.clone(),
            data,
        };
        self.push("l2norm_channels", v, Op::L2Norm { a: ai, channels: c, plane })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (self.val(ai), self.val(bi));
        let (&[m, k], &[k2, n]) = (va.shape(), vb.shape()) else {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        };
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let v = Tensor {
            shape: vec![m, n],
            data: kernels::matmul(&va.data, &vb.data, m, k, n),
        };
        self.push("matmul", v, Op::MatMul { a: ai, b: bi, m, k, n })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let src = self.val(ai);
        let &[rows, cols] = src.shape() else {
            return Err(invalid("transpose", format!("expected a matrix, got {:?}", src.shape)));
        };
        let v = Tensor {
            shape: vec![cols, rows],
            data: kernels::transpose(&src.data, rows, cols),
        };
        self.push("transpose", v, Op::Transpose { a: ai, rows, cols })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let v = self.val(ai).clone().reshaped(shape)?;
        self.push("reshape", v, Op::Reshape { a: ai })
    }

    /// 2x2 average pooling.
    pub fn downsample2x(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let src = self.val(ai);
        let (c, h, w) = src
            .chw()
            .ok_or_else(|| invalid("downsample2x", format!("expected C x H x W, got {:?}", src.shape)))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("downsample2x", format!("odd spatial dims {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let q = T::of(0.25);
        let mut data = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let p = &src.data[ch * h * w..(ch + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let i = 2 * y * w + 2 * x;
                    data.push((p[i] + p[i + 1] + p[i + w] + p[i + w + 1]) * q);
                }
            }
        }
        let v = Tensor {
            shape: vec![c, oh, ow],
            data,
        };
        self.push("downsample2x", v, Op::Down2 { a: ai })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let src = self.val(ai);
        let (c, h, w) = src
            .chw()
            .ok_or_else(|| invalid("upsample2x", format!("expected C x H x W, got {:?}", src.shape)))?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let p = &src.data[ch * h * w..(ch + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    data.push(p[(y / 2) * w + x / 2]);
                }
            }
        }
        let v = Tensor {
            shape: vec![c, oh, ow],
            data,
        };
        self.push("upsample2x", v, Op::Up2 { a: ai })
    }

    fn channel_vector_check(&self, op: &'static str, x: usize, s: usize) -> Result<usize, TensorError> {
        let (vx, vs) = (self.val(x), self.val(s));
        match (vx.chw(), vs.shape()) {
            (Some((c, h, w)), &[cs]) if c == cs => Ok(h * w),
            _ => Err(TensorError::Shape {
                op,
                lhs: vx.shape.clone(),
                rhs: vs.shape.clone(),
            }),
        }
    }

    /// Multiplies channel `c` of `x` (`C x H x W`) by `s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (xi, si) = (self.idx(x)?, self.idx(s)?);
        let plane = self.channel_vector_check("scale_channels", xi, si)?;
        let (vx, vs) = (self.val(xi), self.val(si));
        let data = vx.data.iter().enumerate().map(|(i, &v)| v * vs.data[i / plane]).collect();
        let v = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        self.push("scale_channels", v, Op::ScaleChannels { x: xi, s: si, plane })
    }

    /// Adds `v[c]` to every pixel of channel `c`.
    pub fn add_channels(&mut self, x: Var, v: Var) -> Result<Var, TensorError> {
        let (xi, vi) = (self.idx(x)?, self.idx(v)?);
        let plane = self.channel_vector_check("add_channels", xi, vi)?;
        let (vx, vv) = (self.val(xi), self.val(vi));
        let data = vx.data.iter().enumerate().map(|(i, &a)| a + vv.data[i / plane]).collect();
        let out = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        self.push("add_channels", out, Op::AddChannels { x: xi, v: vi, plane })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let s = self.val(ai).data.iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { a: ai })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ai = self.idx(a)?;
        let src = self.val(ai);
        if src.is_empty() {
            return Err(invalid("mean", "empty tensor"));
        }
        let s = src.data.iter().copied().sum::<T>() / T::of(src.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean { a: ai })
    }

    /// Mean of `sqrt((pred - gt)^2 + eps^2)`, accumulated as excess over
    /// `eps` so identical inputs give exactly `eps`.
    pub fn charbonnier(&mut self, pred: Var, gt: Var, eps: T) -> Result<Var, TensorError> {
        let (pi, gi) = (self.idx(pred)?, self.idx(gt)?);
        let (vp, vg) = (self.val(pi), self.val(gi));
        if vp.shape() != vg.shape() || vp.is_empty() {
            return Err(TensorError::Shape {
                op: "charbonnier",
                lhs: vp.shape.clone(),
                rhs: vg.shape.clone(),
            });
        }
        let e2 = eps * eps;
        let s = vp
            .data
            .iter()
            .zip(&vg.data)
            .map(|(&p, &g)| ((p - g) * (p - g) + e2).sqrt() - eps)
            .sum::<T>()
            / T::of(vp.len() as f64)
            + eps;
        self.push("charbonnier", Tensor::scalar(s), Op::Charbonnier { pred: pi, gt: gi, eps })
    }

    /// Allows another backward pass on this tape.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let li = self.idx(loss)?;
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.val(li).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.val(li).shape.clone()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) =
                    kernels::conv2d_backward(geom, self.val(*x).data(), self.val(*w).data(), g);
                add_into(&mut grads[*x], &gx);
                add_into(&mut grads[*w], &gw);
                add_into(&mut grads[*b], &gb);
            }
            Op::Add { a, b, bcast } => match bcast {
                Bcast::None => {
                    add_into(&mut grads[*a], g);
                    add_into(&mut grads[*b], g);
                }
                Bcast::Rhs => {
                    add_into(&mut grads[*a], g);
                    add_into(&mut grads[*b], &sum_channels(g, self.val(*b).len()));
                }
                Bcast::Lhs => {
                    add_into(&mut grads[*a], &sum_channels(g, self.val(*a).len()));
                    add_into(&mut grads[*b], g);
                }
            },
            Op::Sub { a, b } => {
                add_into(&mut grads[*a], g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                add_into(&mut grads[*b], &neg);
            }
            Op::Mul { a, b, bcast } => {
                let (va, vb) = (&self.val(*a).data, &self.val(*b).data);
                match bcast {
                    Bcast::None => {
                        let ga: Vec<T> = g.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                        let gb: Vec<T> = g.iter().zip(va).map(|(&x, &y)| x * y).collect();
                        add_into(&mut grads[*a], &ga);
                        add_into(&mut grads[*b], &gb);
                    }
                    Bcast::Rhs => {
                        let plane = vb.len();
                        let ga: Vec<T> = g.iter().enumerate().map(|(k, &x)| x * vb[k % plane]).collect();
                        let full: Vec<T> = g.iter().zip(va).map(|(&x, &y)| x * y).collect();
                        add_into(&mut grads[*a], &ga);
                        add_into(&mut grads[*b], &sum_channels(&full, plane));
                    }
                    Bcast::Lhs => {
                        let plane = va.len();
                        let gb: Vec<T> = g.iter().enumerate().map(|(k, &x)| x * va[k % plane]).collect();
                        let full: Vec<T> = g.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                        add_into(&mut grads[*a], &sum_channels(&full, plane));
                        add_into(&mut grads[*b], &gb);
                    }
                }
            }
            Op::Affine { a, scale } => {
                let ga: Vec<T> = g.iter().map(|&v| v * *scale).collect();
                add_into(&mut grads[*a], &ga);
            }
            Op::Sigmoid { a } => {
                let ga: Vec<T> = g
                    .iter()
                    .zip(&out.data)
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                add_into(&mut grads[*a], &ga);
            }
            Op::Exp { a } => {
                let ga: Vec<T> = g.iter().zip(&out.data).map(|(&gv, &y)| gv * y).collect();
                add_into(&mut grads[*a], &ga);
            }
            Op::Concat { a, b, split } => {
                add_into(&mut grads[*a], &g[..*split]);
                add_into(&mut grads[*b], &g[*split..]);
            }
            Op::Softmax { a, outer, len, inner } => {
                let y = &out.data;
                let mut ga = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            ga[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                add_into(&mut grads[*a], &ga);
            }
            Op::Gap { a, plane } => {
                let inv = T::one() / T::of(*plane as f64);
                let ga: Vec<T> = (0..self.val(*a).len()).map(|k| g[k / plane] * inv).collect();
                add_into(&mut grads[*a], &ga);
            }
            Op::L2Norm { a, channels, plane } => {
                let x = &self.val(*a).data;
                let y = &out.data;
                let eps = T::of(L2_EPS);
                let mut ga = vec![T::zero(); x.len()];
                for p in 0..*plane {
                    let n = (0..*channels).map(|c| x[c * plane + p].powi(2)).sum::<T>().sqrt();
                    if n < eps {
                        continue;
                    }
                    let dot: T = (0..*channels).map(|c| g[c * plane + p] * y[c * plane + p]).sum();
                    for c in 0..*channels {
                        let k = c * plane + p;
                        ga[k] = (g[k] - y[k] * dot) / n;
                    }
                }
                add_into(&mut grads[*a], &ga);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (&self.val(*a).data, &self.val(*b).data);
                let bt = kernels::transpose(vb, *k, *n);
                let at = kernels::transpose(va, *m, *k);
                add_into(&mut grads[*a], &kernels::matmul(g, &bt, *m, *n, *k));
                add_into(&mut grads[*b], &kernels::matmul(&at, g, *k, *m, *n));
            }
            Op::Transpose { a, rows, cols } => {
                add_into(&mut grads[*a], &kernels::transpose(g, *cols, *rows));
            }
            Op::Reshape { a } => add_into(&mut grads[*a], g),
            Op::Down2 { a } => {
                let (c, h, w) = self.val(*a).chw().unwrap();
                let (oh, ow) = (h / 2, w / 2);
                let q = T::of(0.25);
                let mut ga = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            ga[(ch * h + y) * w + x] = g[(ch * oh + y / 2) * ow + x / 2] * q;
                        }
                    }
                }
                add_into(&mut grads[*a], &ga);
            }
            Op::Up2 { a } => {
                let (c, h, w) = self.val(*a).chw().unwrap();
                let ow = 2 * w;
                let mut ga = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let base = (ch * 2 * h + 2 * y) * ow + 2 * x;
                            ga[(ch * h + y) * w + x] = g[base] + g[base + 1] + g[base + ow] + g[base + ow + 1];
                        }
                    }
                }
                add_into(&mut grads[*a], &ga);
            }
            Op::ScaleChannels { x, s, plane } => {
                let (vx, vs) = (&self.val(*x).data, &self.val(*s).data);
                let gx: Vec<T> = g.iter().enumerate().map(|(k, &gv)| gv * vs[k / plane]).collect();
                let gs: Vec<T> = g
                    .chunks_exact(*plane)
                    .zip(vx.chunks_exact(*plane))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                    .collect();
                add_into(&mut grads[*x], &gx);
                add_into(&mut grads[*s], &gs);
            }
            Op::AddChannels { x, v, plane } => {
                add_into(&mut grads[*x], g);
                let gv: Vec<T> = g.chunks_exact(*plane).map(|c| c.iter().copied().sum()).collect();
                add_into(&mut grads[*v], &gv);
            }
            Op::Sum { a } => {
                let ga = vec![g[0]; self.val(*a).len()];
                add_into(&mut grads[*a], &ga);
            }
            Op::Mean { a } => {
                let n = self.val(*a).len();
                let ga = vec![g[0] / T::of(n as f64); n];
                add_into(&mut grads[*a], &ga);
            }
            Op::Charbonnier { pred, gt, eps } => {
                let (vp, vg) = (&self.val(*pred).data, &self.val(*gt).data);
                let scale = g[0] / T::of(vp.len() as f64);
                let e2 = *eps * *eps;
                let gp: Vec<T> = vp
                    .iter()
                    .zip(vg)
                    .map(|(&p, &q)| {
                        let d = p - q;
                        scale * d / (d * d + e2).sqrt()
                    })
                    .collect();
                let gq: Vec<T> = gp.iter().map(|&v| -v).collect();
                add_into(&mut grads[*pred], &gp);
                add_into(&mut grads[*gt], &gq);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| (i as f64 * 0.37).sin())
    }

    #[test]
    fn identity_and_zero_convolutions() {
        let mut tape = Tape::new();
        let x = tape.input(ramp(&[2, 4, 5])).unwrap();
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let w = tape.input(w).unwrap();
        let b = tape.input(Tensor::zeros(&[2])).unwrap();
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let w0 = tape.input(Tensor::zeros(&[3, 2, 3, 3])).unwrap();
        let b0 = tape.input(Tensor::zeros(&[3])).unwrap();
        let z = tape.conv2d(x, w0, b0, 1, 1).unwrap();
        assert_eq!(tape.value(z).shape(), &[3, 4, 5]);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_shape_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(ramp(&[2, 4, 4])).unwrap();
        let w = tape.input(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        let b = tape.input(Tensor::zeros(&[1])).unwrap();
        assert!(matches!(tape.conv2d(x, w, b, 1, 1), Err(TensorError::Shape { .. })));
        let w = tape.input(Tensor::zeros(&[1, 2, 2, 2])).unwrap();
        assert!(tape.conv2d(x, w, b, 1, 1).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::zeros(&[3])).unwrap();
        let s = tape.sigmoid(z).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| v == 0.5));

        let a = tape.input(ramp(&[2, 3, 3])).unwrap();
        let ones = tape.input(Tensor::full(&[2, 3, 3], 1.0)).unwrap();
        let m = tape.mul(a, ones).unwrap();
        assert_eq!(tape.value(m), tape.value(a));

        let bad = tape.input(Tensor::zeros(&[2, 3, 4])).unwrap();
        assert!(tape.add(a, bad).is_err());
        assert!(tape.sub(a, ones).is_ok());
        let one_ch = tape.input(Tensor::full(&[1, 3, 3], 2.0)).unwrap();
        let scaled = tape.mul(a, one_ch).unwrap();
        for (x, y) in tape.value(scaled).data().iter().zip(tape.value(a).data()) {
            assert_eq!(*x, 2.0 * y);
        }
        assert!(tape.sub(a, one_ch).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[5], 3.0)).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        assert!(tape.value(s).data().iter().all(|v: &f64| (v - 0.2).abs() < 1e-15));
        assert!(tape.softmax(x, 1).is_err());

        let big = tape.input(Tensor::from_fn(&[3, 4], |i| 500.0 * i as f64)).unwrap();
        let s = tape.softmax(big, 1).unwrap();
        for row in tape.value(s).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gap_examples() {
        let mut tape = Tape::new();
        let c = tape.input(Tensor::full(&[3, 4, 2], 0.7)).unwrap();
        let g = tape.gap(c).unwrap();
        assert!(tape.value(g).data().iter().all(|v: &f64| (v - 0.7).abs() < 1e-15));

        let a = tape.input(ramp(&[2, 3, 3])).unwrap();
        let b = tape.input(Tensor::from_fn(&[2, 3, 3], |i| i as f64 * 0.1)).unwrap();
        let ab = tape.add(a, b).unwrap();
        let (ga, gb, gab) = (tape.gap(a).unwrap(), tape.gap(b).unwrap(), tape.gap(ab).unwrap());
        for i in 0..2 {
            let lhs = tape.value(gab).data()[i];
            let rhs = tape.value(ga).data()[i] + tape.value(gb).data()[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn l2norm_examples() {
        let mut tape = Tape::new();
        let onehot = tape.input(t(&[3, 1, 2], &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0])).unwrap();
        let n = tape.l2norm_channels(onehot).unwrap();
        assert_eq!(tape.value(n), tape.value(onehot));

        let x = tape.input(t(&[2, 1, 2], &[3.0, 0.0, 4.0, 0.0])).unwrap();
        let n = tape.l2norm_channels(x).unwrap();
        assert_eq!(tape.value(n).data(), &[0.6, 0.0, 0.8, 0.0]);
        let loss = tape.sum(n).unwrap();
        let g = tape.backward(loss).unwrap().get(x).unwrap();
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[3], 0.0);
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.input(ramp(&[3, 4])).unwrap();
        let eye = tape.input(Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 })).unwrap();
        let p = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(p), tape.value(a));

        let b = tape.input(Tensor::from_fn(&[4, 2], |i| i as f64 - 3.0)).unwrap();
        let ab = tape.matmul(a, b).unwrap();
        let abt = tape.transpose(ab).unwrap();
        let (at, bt) = (tape.transpose(a).unwrap(), tape.transpose(b).unwrap());
        let btat = tape.matmul(bt, at).unwrap();
        for (x, y) in tape.value(abt).data().iter().zip(tape.value(btat).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn resample_examples() {
        let mut tape = Tape::new();
        let c = tape.input(Tensor::full(&[2, 4, 6], 0.3)).unwrap();
        let d = tape.downsample2x(c).unwrap();
        assert_eq!(tape.value(d).shape(), &[2, 2, 3]);
        assert!(tape.value(d).data().iter().all(|v: &f64| (v - 0.3).abs() < 1e-15));
        let u = tape.upsample2x(d).unwrap();
        assert_eq!(tape.value(u).shape(), tape.value(c).shape());
        assert!(tape.value(u).data().iter().all(|v: &f64| (v - 0.3).abs() < 1e-15));
        let odd = tape.input(Tensor::zeros(&[1, 3, 4])).unwrap();
        assert!(tape.downsample2x(odd).is_err());
    }

    #[test]
    fn backward_examples() {
        let x0 = ramp(&[2, 3]);
        let mut tape = Tape::new();
        let x = tape.input(x0.clone()).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut tape = Tape::new();
        let x = tape.input(x0.clone()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap().get(x).unwrap();
        for (a, b) in g.data().iter().zip(x0.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(ramp(&[3])).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::BackwardTwice)));
        tape.reset_backward();
        assert!(tape.backward(s).is_ok());

        let mut other = Tape::<f64>::new();
        assert!(matches!(other.backward(s), Err(TensorError::Detached)));
        assert!(matches!(other.sigmoid(x), Err(TensorError::Detached)));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::full(&[2], 1000.0)).unwrap();
        assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { op: "exp" })));
        assert!(tape.input(Tensor::full(&[1], f64::NAN)).is_err());
    }

    #[test]
    fn shared_param_accumulates() {
        let mut tape = Tape::new();
        let w0 = Tensor::full(&[2], 3.0);
        let a = tape.param("w", &w0).unwrap();
        let b = tape.param("w", &w0).unwrap();
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn charbonnier_examples() {
        let mut tape = Tape::new();
        let a = tape.input(ramp(&[1, 4, 4])).unwrap();
        let l = tape.charbonnier(a, a, 1e-6).unwrap();
        assert_eq!(tape.value(l).item(), Some(1e-6));
        let b = tape.input(Tensor::from_fn(&[1, 4, 4], |i| (i as f64 * 0.37).sin() + 0.1)).unwrap();
        let l = tape.charbonnier(a, b, 1e-6).unwrap();
        assert!((tape.value(l).item().unwrap() - (0.01f64 + 1e-12).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_normalizes_and_sigmoid_is_open(
            vals in prop::collection::vec(-50.0f64..50.0, 12),
            axis in 0usize..2,
        ) {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::new(vec![3, 4], vals).unwrap()).unwrap();
            let s = tape.softmax(x, axis).unwrap();
            let sm = tape.value(s).data().to_vec();
            let sums: Vec<f64> = if axis == 1 {
                sm.chunks(4).map(|r| r.iter().sum()).collect()
            } else {
                (0..4).map(|j| (0..3).map(|i| sm[i * 4 + j]).sum()).collect()
            };
            for v in sums {
                prop_assert!((v - 1.0).abs() < 1e-6);
            }
            let g = tape.scale(x, 0.3).unwrap();
            let g = tape.sigmoid(g).unwrap();
            prop_assert!(tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn l2norm_gives_unit_vectors(vals in prop::collection::vec(-5.0f64..5.0, 12)) {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::new(vec![3, 2, 2], vals.clone()).unwrap()).unwrap();
            let n = tape.l2norm_channels(x).unwrap();
            let d = tape.value(n).data();
            for p in 0..4 {
                let raw: f64 = (0..3).map(|c| vals[c * 4 + p].powi(2)).sum::<f64>().sqrt();
                let norm: f64 = (0..3).map(|c| d[c * 4 + p].powi(2)).sum::<f64>().sqrt();
                if raw > 1e-6 {
                    prop_assert!((norm - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
