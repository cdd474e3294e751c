//! Dense NCHW tensors and a tape-free, build-then-run autodiff graph.
//!
//! Kernels in [`kernels`] are pure functions over slices and back the
//! public single-op functions ([`conv2d`], [`maxpool2x2`], [`deconv2d`], ...)
//! as well as the [`Graph`] executor. Everything is generic over [`Scalar`]
//! so training can run in `f32` while gradient checks run in `f64`.

mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

pub use checkpoint::{read_checkpoint, write_checkpoint, ParamSet, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId, SlotId};

use crate::error::{Error, Result};

pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {:?} holds {} elements, buffer has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::full(&[1], v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "gradient of length {} for tensor of {} elements",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Interprets the tensor as NCHW.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::InvalidShape(format!(
                "expected a 4-d NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Pointwise operation kinds exposed through [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::InvalidShape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// Applies a pointwise op. Unary kinds take one input, binary kinds two.
pub fn elementwise<T: Scalar>(kind: Elementwise, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let unary = |f: fn(T) -> T| -> Result<Tensor<T>> {
        let [x] = inputs else {
            return Err(Error::InvalidShape(format!(
                "{kind:?} takes one input, got {}",
                inputs.len()
            )));
        };
        Ok(Tensor::from_fn(&x.shape, |i| f(x.data[i])))
    };
    match kind {
        Elementwise::Relu => unary(kernels::relu),
        Elementwise::Sigmoid => unary(kernels::sigmoid),
        Elementwise::Tanh => unary(|v: T| v.tanh()),
        Elementwise::Scale(s) => {
            let [x] = inputs else {
                return Err(Error::InvalidShape("scale takes one input".into()));
            };
            let s = T::of(s);
            Ok(Tensor::from_fn(&x.shape, |i| x.data[i] * s))
        }
        Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div => {
            let [a, b] = inputs else {
                return Err(Error::InvalidShape(format!(
                    "{kind:?} takes two inputs, got {}",
                    inputs.len()
                )));
            };
            same_shape(a, b, "elementwise")?;
            if kind == Elementwise::Div {
                if let Some(index) = b.data.iter().position(|v| *v == T::zero()) {
                    return Err(Error::DivisionByZero { index });
                }
            }
            let f: fn(T, T) -> T = match kind {
                Elementwise::Add => |x, y| x + y,
                Elementwise::Sub => |x, y| x - y,
                Elementwise::Mul => |x, y| x * y,
                _ => |x, y| x / y,
            };
            Ok(Tensor::from_fn(&a.shape, |i| f(a.data[i], b.data[i])))
        }
    }
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = kernels::ConvGeometry::new(input.shape(), weights.shape(), bias.shape(), stride, padding)?;
    let mut out = Tensor::zeros(&geo.output_shape());
    kernels::conv2d_forward(&geo, &input.data, &weights.data, &bias.data, &mut out.data);
    Ok(out)
}

/// Max pooling result: the pooled tensor and, per output element, the flat
/// input index that won the window.
pub type ArgIndices = Vec<usize>;

pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, ArgIndices)> {
    let [n, c, h, w] = input.dims4()?;
    kernels::check_poolable(h, w)?;
    let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]);
    let mut arg = vec![0; out.numel()];
    kernels::maxpool_forward([n, c, h, w], &input.data, &mut out.data, &mut arg);
    Ok((out, arg))
}

pub fn deconv2d<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let geo = kernels::DeconvGeometry::new(input.shape(), weights.shape(), factor)?;
    let mut out = Tensor::zeros(&geo.output_shape());
    kernels::deconv_forward(&geo, &input.data, &weights.data, &mut out.data);
    Ok(out)
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let out_shape = kernels::concat_shape(a.shape(), b.shape())?;
    let mut out = Tensor::zeros(&out_shape);
    kernels::concat_forward(a.shape(), b.shape(), &a.data, &b.data, &mut out.data);
    Ok(out)
}

/// Inverse of [`concat_channels`]: channels `[start, start + len)`.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if start + len > c {
        return Err(Error::InvalidShape(format!(
            "channel slice {start}..{} of a {c}-channel tensor",
            start + len
        )));
    }
    let mut out = Tensor::zeros(&[n, len, h, w]);
    kernels::slice_channels_forward([n, c, h, w], start, len, &x.data, &mut out.data);
    Ok(out)
}

/// Mean per-pixel cross entropy of `softmax(logits)` against `labels`.
/// Pixels where `ignore` is true do not contribute. Returns the loss and
/// its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    ignore: &[bool],
) -> Result<(T, Tensor<T>)> {
    let [n, c, h, w] = logits.dims4()?;
    if labels.len() != n * h * w || ignore.len() != n * h * w {
        return Err(Error::InvalidShape(format!(
            "{} labels / {} mask entries for {} pixels",
            labels.len(),
            ignore.len(),
            n * h * w
        )));
    }
    let targets = kernels::targets_from_labels(labels, ignore, c)?;
    let mut grad = Tensor::zeros(logits.shape());
    let mut probs = vec![T::zero(); logits.numel()];
    let loss = kernels::softmax_ce_forward(
        [n, c, h, w],
        &logits.data,
        &targets,
        &mut probs,
    );
    kernels::softmax_ce_backward([n, c, h, w], &probs, &targets, T::one(), &mut grad.data);
    Ok((loss, grad))
}

/// Channel-wise softmax of an NCHW tensor.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = logits.dims4()?;
    let mut out = Tensor::zeros(logits.shape());
    kernels::softmax_forward(dims, &logits.data, &mut out.data);
    Ok(out)
}

#[cfg(test)]
mod tests;
