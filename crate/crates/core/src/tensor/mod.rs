//! A deliberately small reverse-mode autodiff kernel.
//!
//! Values live on a [`Tape`] that records every operation in creation order,
//! which is already a topological order; [`Tape::backward`] walks it once in
//! reverse. Every op has an analytic backward pass, and [`finite_diff`]
//! provides the central-difference oracle used to check each of them. The
//! kernel is generic over [`Scalar`] so the same code trains in `f32` and is
//! verified in `f64`.

mod checkpoint;
mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use gradcheck::{check_all_ops, finite_diff, gradient_check, random_projection, rel_error, OpCheck};
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to this tape")]
    Detached,
    #[error("backward already ran on this tape; call reset_backward first")]
    BackwardTwice,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn invalid(op: &'static str, message: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        message: message.into(),
    }
}

/// Dense row-major array of rank 0 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.len() > 4 {
            return Err(invalid("tensor", format!("rank {} exceeds 4", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `C x H x W` split, treating rank-2 tensors as a single channel.
    pub(crate) fn chw(&self) -> Option<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Some((*c, *h, *w)),
            _ => None,
        }
    }
}

/// Sinusoidal encoding of a normalized time: entry `2i` is
/// `sin(t / 10000^(2i/C))` and entry `2i+1` the matching cosine.
pub fn positional_encoding<T: Scalar>(t_norm: f64, channels: usize) -> Result<Tensor<T>, TensorError> {
    if channels == 0 || channels % 2 != 0 {
        return Err(invalid(
            "positional_encoding",
            format!("channel count must be even and positive, got {channels}"),
        ));
    }
    let mut data = Vec::with_capacity(channels);
    for i in 0..channels / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / channels as f64);
        let arg = t_norm / freq;
        data.push(T::of(arg.sin()));
        data.push(T::of(arg.cos()));
    }
    Tensor::new(vec![channels], data)
}
