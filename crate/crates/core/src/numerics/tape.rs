//! Reverse-mode differentiation over a linear record of executed ops.

use super::conv::{conv_backward, conv_forward, ConvPlan};
use super::tensor::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Real> {
    Constant,
    Param(String),
    Conv {
        input: Var,
        kernel: Var,
        bias: Var,
        plan: ConvPlan,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    /// Scalar produced outside the tape whose gradient with respect to
    /// `input` was computed alongside the value.
    Fused { input: Var, grad: Tensor<T> },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// The computation record: ops in execution order. One tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Whether `b` can be combined with `a`: equal shapes, or `b` is a vector
/// matching `a`'s trailing channel dim.
fn broadcast_kind<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<bool> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if b.shape() == [a.channels()] {
        Ok(true)
    } else {
        Err(Error::Shape(format!(
            "{what}: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records a named parameter; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        let value = params.require(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    pub fn conv2d_same(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let plan = ConvPlan::new::<T>(self.value(kernel).shape(), None)?;
        self.conv_with_plan(input, kernel, bias, plan)
    }

    pub fn masked_conv2d_same(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        mask: &Tensor<T>,
    ) -> Result<Var> {
        let plan = ConvPlan::new(self.value(kernel).shape(), Some(mask))?;
        self.conv_with_plan(input, kernel, bias, plan)
    }

    pub fn conv_with_plan(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        plan: ConvPlan,
    ) -> Result<Var> {
        let out = conv_forward(self.value(input), self.value(kernel), self.value(bias), &plan)?;
        Ok(self.push(
            out,
            Op::Conv {
                input,
                kernel,
                bias,
                plan,
            },
        ))
    }

    /// Which relu units are active, over every relu on the tape in order.
    /// Two evaluations with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.value(a).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(relu);
        self.push(out, Op::Relu(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let k = T::of(s);
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_f64();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum_f64() / t.len() as f64;
        self.push(Tensor::scalar(T::of(s)), Op::Mean(a))
    }

    /// Records a scalar computed elsewhere together with its gradient with
    /// respect to `input`.
    pub fn fused_scalar(&mut self, input: Var, value: f64, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.value(input).shape() {
            return Err(Error::Shape(format!(
                "fused gradient shape {:?} does not match input {:?}",
                grad.shape(),
                self.value(input).shape()
            )));
        }
        Ok(self.push(Tensor::scalar(T::of(value)), Op::Fused { input, grad }))
    }

    /// Gradient of the scalar `loss` with respect to every parameter in
    /// `params`. Parameters that did not take part get exact zeros.
    pub fn backward(&self, loss: Var, params: &ParamSet<T>) -> Result<ParamSet<T>> {
        self.backward_with_trace(loss, params).map(|(g, _)| g)
    }

    /// Like [`Tape::backward`], also returning the node indices visited.
    pub fn backward_with_trace(
        &self,
        loss: Var,
        params: &ParamSet<T>,
    ) -> Result<(ParamSet<T>, Vec<usize>)> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = params.zeros_like();
        let mut visited = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            visited.push(idx);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    if let Some(dst) = out.get_mut(name) {
                        dst.add_assign(&g);
                    }
                }
                Op::Conv {
                    input,
                    kernel,
                    plan,
                    bias,
                } => {
                    let cg = conv_backward(self.value(*input), self.value(*kernel), plan, &g);
                    accumulate(&mut grads, *input, cg.input);
                    accumulate(&mut grads, *kernel, cg.kernel);
                    accumulate(&mut grads, *bias, cg.bias);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = Tensor::from_fn(x.shape(), |i| {
                        if x.data()[i] > T::zero() {
                            g.data()[i]
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Add(a, b) => {
                    let bcast = self.value(*b).shape() != self.value(*a).shape();
                    let gb = if bcast { reduce_to_channels(&g) } else { g.clone() };
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let bcast = bv.shape() != av.shape();
                    let c = av.channels();
                    let ga = Tensor::from_fn(av.shape(), |i| {
                        let bi = if bcast { i % c } else { i };
                        g.data()[i] * bv.data()[bi]
                    });
                    let prod = Tensor::from_fn(av.shape(), |i| g.data()[i] * av.data()[i]);
                    let gb = if bcast { reduce_to_channels(&prod) } else { prod };
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let k = T::of(*s);
                    accumulate(&mut grads, *a, g.map(|v| v * k));
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::full(&shape, g.data()[0]));
                }
                Op::Mean(a) => {
                    let t = self.value(*a);
                    let k = T::of(g.data()[0].f64() / t.len() as f64);
                    accumulate(&mut grads, *a, Tensor::full(t.shape(), k));
                }
                Op::Fused { input, grad } => {
                    let k = g.data()[0];
                    accumulate(&mut grads, *input, grad.map(|v| v * k));
                }
            }
        }
        Ok((out, visited))
    }
}

#[inline]
pub(crate) fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    what: &str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let bcast = broadcast_kind(a, b, what)?;
    let c = a.channels();
    Ok(Tensor::from_fn(a.shape(), |i| {
        f(a.data()[i], b.data()[if bcast { i % c } else { i }])
    }))
}

fn reduce_to_channels<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let c = g.channels();
    let mut acc = vec![0.0f64; c];
    for chunk in g.data().chunks(c) {
        for (a, v) in acc.iter_mut().zip(chunk) {
            *a += v.f64();
        }
    }
    Tensor::new(vec![c], acc.into_iter().map(T::of).collect()).expect("channel vector")
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Elementwise ops without recording, for callers that need plain values.
pub fn elementwise<T: Real>(op: Elementwise, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let need_b = || b.ok_or_else(|| Error::Invalid(format!("{op:?} needs two operands")));
    match op {
        Elementwise::Relu => Ok(a.map(relu)),
        Elementwise::Add => binary(a, need_b()?, "add", |x, y| x + y),
        Elementwise::Mul => binary(a, need_b()?, "mul", |x, y| x * y),
        Elementwise::Scale(s) => {
            let k = T::of(s);
            Ok(a.map(|v| v * k))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Relu,
    Add,
    Mul,
    Scale(f64),
}
