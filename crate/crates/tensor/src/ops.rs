//! Differentiable operation catalog.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::{self, Conv2dGeom};
use crate::tape::{Slot, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Leaf { name: Option<String> },
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Sqrt,
    Recip,
    SumAll,
    BroadcastTo,
    SumTo,
    Reshape,
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize },
    Pad { axis: usize, start: usize },
    Flip(usize),
    MatMul { a_trans: bool, b_trans: bool },
    Conv(Conv2dGeom),
    ConvInputGrad(Conv2dGeom),
    ConvWeightGrad(Conv2dGeom),
}

fn c<T: Element>(x: f64) -> T {
    T::from_f64_lossy(x)
}

impl<T: Element> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_arc(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<T> {
        Var {
            tape: self.tape.clone(),
            id: None,
            value: Arc::clone(&self.value),
        }
    }

    pub fn tape(&self) -> &crate::tape::Tape<T> {
        &self.tape
    }

    fn slot(&self) -> Slot<T> {
        Slot {
            id: self.id,
            value: Arc::clone(&self.value),
        }
    }

    fn emit(&self, op: Op, inputs: &[&Var<T>], value: Tensor<T>) -> Result<Var<T>> {
        if inputs.iter().any(|v| !v.tape.same(&self.tape)) {
            return Err(TensorError::TapeMismatch);
        }
        let value = Arc::new(value);
        let id = if inputs.iter().any(|v| v.id.is_some()) {
            let slots = inputs.iter().map(|v| v.slot()).collect();
            Some(self.tape.push(op, slots, Arc::clone(&value)))
        } else {
            None
        };
        Ok(Var {
            tape: self.tape.clone(),
            id,
            value,
        })
    }

    fn unary(&self, op: Op, value: Tensor<T>) -> Result<Var<T>> {
        self.emit(op, &[self], value)
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let v = self.value.zip_map(&other.value, "add", |a, b| a + b)?;
        self.emit(Op::Add, &[self, other], v)
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let v = self.value.zip_map(&other.value, "sub", |a, b| a - b)?;
        self.emit(Op::Sub, &[self, other], v)
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let v = self.value.zip_map(&other.value, "mul", |a, b| a * b)?;
        self.emit(Op::Mul, &[self, other], v)
    }

    pub fn square(&self) -> Result<Var<T>> {
        self.mul(self)
    }

    pub fn neg(&self) -> Result<Var<T>> {
        self.unary(Op::Neg, self.value.map(|x| -x))
    }

    pub fn scale(&self, k: f64) -> Result<Var<T>> {
        let kt: T = c(k);
        self.unary(Op::Scale(k), self.value.map(|x| x * kt))
    }

    pub fn add_scalar(&self, k: f64) -> Result<Var<T>> {
        let kt: T = c(k);
        self.unary(Op::AddScalar(k), self.value.map(|x| x + kt))
    }

    pub fn relu(&self) -> Result<Var<T>> {
        self.unary(Op::Relu, self.value.map(|x| x.max(T::zero())))
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<T>> {
        let s: T = c(slope);
        self.unary(
            Op::LeakyRelu(slope),
            self.value.map(|x| if x > T::zero() { x } else { x * s }),
        )
    }

    pub fn tanh(&self) -> Result<Var<T>> {
        self.unary(Op::Tanh, self.value.map(|x| x.tanh()))
    }

    pub fn sigmoid(&self) -> Result<Var<T>> {
        self.unary(
            Op::Sigmoid,
            self.value.map(|x| T::one() / (T::one() + (-x).exp())),
        )
    }

    /// Square root; its derivative at zero is taken as zero.
    pub fn sqrt(&self) -> Result<Var<T>> {
        self.unary(Op::Sqrt, self.value.map(|x| x.sqrt()))
    }

    /// Reciprocal with `1/0` mapped to zero.
    pub fn recip(&self) -> Result<Var<T>> {
        self.unary(Op::Recip, self.value.map(safe_recip))
    }

    pub fn sum(&self) -> Result<Var<T>> {
        self.unary(Op::SumAll, Tensor::scalar(self.value.sum()))
    }

    pub fn mean(&self) -> Result<Var<T>> {
        let n = self.value.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<T>> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = kernels::broadcast_to(&self.value, shape)?;
        self.unary(Op::BroadcastTo, v)
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Var<T>> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = kernels::sum_to(&self.value, shape)?;
        self.unary(Op::SumTo, v)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = self.value.reshape(shape)?;
        self.unary(Op::Reshape, v)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let v = kernels::slice_axis(&self.value, axis, start, len)?;
        self.unary(Op::Slice { axis, start }, v)
    }

    pub fn pad(&self, axis: usize, start: usize, total: usize) -> Result<Var<T>> {
        let v = kernels::pad_axis(&self.value, axis, start, total)?;
        self.unary(Op::Pad { axis, start }, v)
    }

    pub fn flip(&self, axis: usize) -> Result<Var<T>> {
        let v = kernels::flip(&self.value, axis)?;
        self.unary(Op::Flip(axis), v)
    }

    /// Mirror image along the last (width) axis.
    pub fn hflip(&self) -> Result<Var<T>> {
        self.flip(self.value.rank() - 1)
    }

    pub fn matmul(&self, other: &Var<T>, a_trans: bool, b_trans: bool) -> Result<Var<T>> {
        let v = kernels::matmul(&self.value, &other.value, a_trans, b_trans)?;
        self.emit(Op::MatMul { a_trans, b_trans }, &[self, other], v)
    }

    pub fn conv2d(&self, weight: &Var<T>, geom: Conv2dGeom) -> Result<Var<T>> {
        let v = kernels::conv2d(&self.value, &weight.value, &geom)?;
        self.emit(Op::Conv(geom), &[self, weight], v)
    }

    /// Adjoint of [`Var::conv2d`] in its input; `self` is the output-side gradient.
    pub fn conv2d_input_grad(&self, weight: &Var<T>, geom: Conv2dGeom, in_hw: (usize, usize)) -> Result<Var<T>> {
        let v = kernels::conv2d_input_grad(&self.value, &weight.value, &geom, in_hw)?;
        self.emit(Op::ConvInputGrad(geom), &[self, weight], v)
    }

    /// Adjoint of [`Var::conv2d`] in its weight; `self` is the forward input.
    pub fn conv2d_weight_grad(&self, gy: &Var<T>, geom: Conv2dGeom, k_hw: (usize, usize)) -> Result<Var<T>> {
        let v = kernels::conv2d_weight_grad(&self.value, &gy.value, &geom, k_hw)?;
        self.emit(Op::ConvWeightGrad(geom), &[self, gy], v)
    }

    /// Transposed convolution with weight `C_in x C_out x Kh x Kw`; output
    /// extent `(in - 1) * stride - 2 * padding + kernel`.
    pub fn conv_transpose2d(&self, weight: &Var<T>, stride: usize, padding: usize) -> Result<Var<T>> {
        let geom = Conv2dGeom::strided(stride, padding);
        let (h, w) = spatial(self.shape(), "conv_transpose2d")?;
        let k = spatial(weight.shape(), "conv_transpose2d")?;
        let out = geom.transposed_hw((h, w), k).ok_or_else(|| {
            TensorError::shape(
                "conv_transpose2d",
                format!("input {h}x{w}, kernel {k:?}, stride {stride}, padding {padding} gives an empty output"),
            )
        })?;
        self.conv2d_input_grad(weight, geom, out)
    }

    /// Adds a per-channel vector to a `B x C x ...` tensor.
    pub fn add_channel_bias(&self, bias: &Var<T>) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.len() < 2 || bias.value.len() != shape[1] {
            return Err(TensorError::shape(
                "add_channel_bias",
                format!("bias {:?} does not match channels of {:?}", bias.shape(), shape),
            ));
        }
        let mut bshape = vec![1; shape.len()];
        bshape[1] = shape[1];
        let b = bias.reshape(&bshape)?.broadcast_to(shape)?;
        self.add(&b)
    }

    /// Per-sample, per-channel standardisation over the spatial axes followed
    /// by a per-channel affine map.
    pub fn instance_norm(&self, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let normed = self.instance_standardize(eps)?;
        let c = self.shape()[1];
        let g = gamma.reshape(&[1, c, 1, 1])?.broadcast_to(self.shape())?;
        normed.mul(&g)?.add_channel_bias(beta)
    }

    /// The pre-affine part of [`Var::instance_norm`].
    pub fn instance_standardize(&self, eps: f64) -> Result<Var<T>> {
        let [b, c, h, w] = <[usize; 4]>::try_from(self.shape()).map_err(|_| {
            TensorError::shape("instance_norm", format!("expected B x C x H x W, got {:?}", self.shape()))
        })?;
        if !(eps > 0.0) {
            return Err(TensorError::shape("instance_norm", "eps must be positive"));
        }
        let shape = self.shape().to_vec();
        let inv_n = 1.0 / (h * w) as f64;
        let mean = self.sum_to(&[b, c, 1, 1])?.scale(inv_n)?;
        let centered = self.sub(&mean.broadcast_to(&shape)?)?;
        let var = centered.square()?.sum_to(&[b, c, 1, 1])?.scale(inv_n)?;
        let inv_std = var.add_scalar(eps)?.sqrt()?.recip()?;
        centered.mul(&inv_std.broadcast_to(&shape)?)
    }
}

fn safe_recip<T: Element>(x: T) -> T {
    if x == T::zero() {
        T::zero()
    } else {
        T::one() / x
    }
}

fn spatial(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [_, _, h, w] => Ok((*h, *w)),
        _ => Err(TensorError::shape(op, format!("expected rank 4, got {shape:?}"))),
    }
}

/// Joins vars along `axis`.
pub fn concat<T: Element>(parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::shape("concat", "no operands"))?;
    let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value.as_ref()).collect();
    let v = kernels::concat(&values, axis)?;
    let sizes = parts.iter().map(|p| p.shape()[axis]).collect();
    first.emit(Op::Concat { axis, sizes }, parts, v)
}

fn mask<T: Element>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

impl Op {
    /// Input gradients given the upstream gradient `g`; entries whose `needs`
    /// flag is false may be skipped.
    pub(crate) fn backward<T: Element>(
        &self,
        inputs: &[Var<T>],
        out: &Var<T>,
        g: &Var<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Var<T>>>> {
        let tape = &g.tape;
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        let x = &inputs[0];
        Ok(match self {
            Op::Leaf { .. } => Vec::new(),
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), if want(1) { Some(g.neg()?) } else { None }],
            Op::Mul => vec![
                if want(0) { Some(g.mul(&inputs[1])?) } else { None },
                if want(1) { Some(g.mul(x)?) } else { None },
            ],
            Op::Neg => vec![Some(g.neg()?)],
            Op::Scale(k) => vec![Some(g.scale(*k)?)],
            Op::AddScalar(_) => vec![Some(g.clone())],
            Op::Relu => {
                let m = mask(&x.value, |v| if v > T::zero() { T::one() } else { T::zero() });
                vec![Some(g.mul(&tape.constant(m))?)]
            }
            Op::LeakyRelu(slope) => {
                let s: T = c(*slope);
                let m = mask(&x.value, |v| if v > T::zero() { T::one() } else { s });
                vec![Some(g.mul(&tape.constant(m))?)]
            }
            Op::Tanh => {
                let d = out.square()?.neg()?.add_scalar(1.0)?;
                vec![Some(g.mul(&d)?)]
            }
            Op::Sigmoid => {
                let d = out.mul(&out.neg()?.add_scalar(1.0)?)?;
                vec![Some(g.mul(&d)?)]
            }
            Op::Sqrt => vec![Some(g.mul(&out.recip()?)?.scale(0.5)?)],
            Op::Recip => vec![Some(g.mul(&out.square()?)?.neg()?)],
            Op::SumAll => vec![Some(g.broadcast_to(x.shape())?)],
            Op::BroadcastTo => vec![Some(g.sum_to(x.shape())?)],
            Op::SumTo => vec![Some(g.broadcast_to(x.shape())?)],
            Op::Reshape => vec![Some(g.reshape(x.shape())?)],
            Op::Concat { axis, sizes } => {
                let mut start = 0;
                let mut parts = Vec::with_capacity(sizes.len());
                for (i, &len) in sizes.iter().enumerate() {
                    parts.push(if want(i) { Some(g.slice(*axis, start, len)?) } else { None });
                    start += len;
                }
                parts
            }
            Op::Slice { axis, start } => vec![Some(g.pad(*axis, *start, x.shape()[*axis])?)],
            Op::Pad { axis, start } => vec![Some(g.slice(*axis, *start, x.shape()[*axis])?)],
            Op::Flip(axis) => vec![Some(g.flip(*axis)?)],
            Op::MatMul { a_trans, b_trans } => {
                let (a, b) = (x, &inputs[1]);
                let ga = if !want(0) {
                    None
                } else if *a_trans {
                    Some(b.matmul(g, *b_trans, true)?)
                } else {
                    Some(g.matmul(b, false, !*b_trans)?)
                };
                let gb = if !want(1) {
                    None
                } else if *b_trans {
                    Some(g.matmul(a, true, *a_trans)?)
                } else {
                    Some(a.matmul(g, !*a_trans, false)?)
                };
                vec![ga, gb]
            }
            Op::Conv(geom) => {
                let w = &inputs[1];
                let in_hw = spatial(x.shape(), "conv2d")?;
                let k_hw = spatial(w.shape(), "conv2d")?;
                vec![
                    if want(0) { Some(g.conv2d_input_grad(w, *geom, in_hw)?) } else { None },
                    if want(1) { Some(x.conv2d_weight_grad(g, *geom, k_hw)?) } else { None },
                ]
            }
            Op::ConvInputGrad(geom) => {
                // out = A^T(gy; w): gy' = A(g; w), w' = W(g, gy)
                let (gy, w) = (x, &inputs[1]);
                let k_hw = spatial(w.shape(), "conv2d_input_grad")?;
                vec![
                    if want(0) { Some(g.conv2d(w, *geom)?) } else { None },
                    if want(1) { Some(g.conv2d_weight_grad(gy, *geom, k_hw)?) } else { None },
                ]
            }
            Op::ConvWeightGrad(geom) => {
                // out = W(x, gy): x' = A^T(gy; g), gy' = A(x; g)
                let gy = &inputs[1];
                let in_hw = spatial(x.shape(), "conv2d_weight_grad")?;
                vec![
                    if want(0) { Some(gy.conv2d_input_grad(g, *geom, in_hw)?) } else { None },
                    if want(1) { Some(x.conv2d(g, *geom)?) } else { None },
                ]
            }
        })
    }
}
