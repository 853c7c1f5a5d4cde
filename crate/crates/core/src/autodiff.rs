//! Tape-based reverse-mode differentiation with recordable backward passes.
//!
//! Every operation appends a node to a [`Tape`]; node order is a valid
//! topological order. [`Tape::grad`] walks the nodes in strict reverse
//! append order and expresses each vector-Jacobian product with ordinary
//! tape operations. When `record_backward` is set those gradient nodes stay
//! connected to the graph, so a penalty built from them (an input-gradient
//! norm, say) can itself be differentiated with respect to the parameters.
//! Without it the backward pass runs on detached copies of every saved
//! value and produces constants only.
//!
//! Gradient contributions are summed as they arrive: nodes in reverse append
//! order, inputs of a node left to right. The order never depends on
//! anything but the recorded graph, so replaying a tape is bitwise
//! deterministic.
//!
//! ReLU uses the subgradient `relu'(0) = 0`; its backward multiplies by a
//! constant 0/1 mask, so second derivatives through a ReLU are zero.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a leaf entered the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Parameter,
    Input,
    /// Constants and detached values; never receive gradient.
    Constant,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf(LeafKind),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    AddBias { x: usize, bias: usize },
    BiasGrad(usize),
    BroadcastAxis1(usize),
    Relu(usize),
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    Conv2dInput { g: usize, w: usize, stride: usize, pad: usize },
    Conv2dWeight { x: usize, g: usize, stride: usize, pad: usize },
    AvgPool { x: usize, kernel: usize, stride: usize },
    AvgPoolBackward { g: usize, kernel: usize, stride: usize },
    GlobalAvgPool(usize),
    GlobalAvgPoolBackward(usize),
    Reshape(usize),
    SumAll(usize),
    BroadcastAll(usize),
    SumLast(usize),
    BroadcastLast(usize),
    LogSoftmax(usize),
    Exp(usize),
    Sqrt(usize),
    Recip(usize),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            AddBias { x, bias } => vec![*x, *bias],
            Conv2d { x, w, .. } => vec![*x, *w],
            Conv2dInput { g, w, .. } => vec![*g, *w],
            Conv2dWeight { x, g, .. } => vec![*x, *g],
            Scale(a, _)
            | BiasGrad(a)
            | Relu(a)
            | GlobalAvgPool(a)
            | Reshape(a)
            | SumAll(a)
            | SumLast(a)
            | LogSoftmax(a)
            | Exp(a)
            | Sqrt(a)
            | Recip(a)
            | BroadcastAxis1(a)
            | BroadcastAll(a)
            | BroadcastLast(a)
            | GlobalAvgPoolBackward(a) => vec![*a],
            AvgPool { x, .. } => vec![*x],
            AvgPoolBackward { g, .. } => vec![*g],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
}

/// Append-only record of a computation.
///
/// A tape is confined to one thread; independent tapes may run on separate
/// threads.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.value().shape())
    }
}

/// What to differentiate, with respect to what.
pub struct GradientRequest<'t, T: Scalar> {
    pub target: Var<'t, T>,
    pub with_respect_to: Vec<Var<'t, T>>,
    /// Keep the produced gradients differentiable.
    pub record_backward: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op<T>, value: Tensor<T>) -> Var<'_, T> {
        self.push_rc(op, Rc::new(value))
    }

    fn push_rc(&self, op: Op<T>, value: Rc<Tensor<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf(kind) => *kind != LeafKind::Constant,
            other => other.inputs().iter().any(|&i| nodes[i].requires_grad),
        };
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Tensor<T>, kind: LeafKind) -> Var<'_, T> {
        self.push(Op::Leaf(kind), value)
    }

    pub fn parameter(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, LeafKind::Parameter)
    }

    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, LeafKind::Input)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, LeafKind::Constant)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn var(&self, id: usize) -> Var<'_, T> {
        Var { tape: self, id }
    }

    /// Gradients of a scalar target with respect to each requested node, in
    /// request order. A node the target does not depend on (a constant or
    /// detached leaf, for instance) gets a zero tensor.
    pub fn grad<'t>(&'t self, request: &GradientRequest<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let target = request.target;
        if !std::ptr::eq(target.tape, self) || request.with_respect_to.iter().any(|v| !std::ptr::eq(v.tape, self)) {
            return Err(Error::Usage("gradient request mixes tapes".into()));
        }
        if !target.value().is_scalar() {
            return Err(Error::Usage(format!(
                "gradient target must be scalar, got shape {:?}",
                target.value().shape()
            )));
        }
        let end = target.id + 1;

        // Which nodes lie on a path from a requested node to the target.
        let mut wanted = vec![false; end];
        for v in &request.with_respect_to {
            if v.id < end {
                wanted[v.id] = true;
            }
        }
        let mut reaches = vec![false; end];
        {
            let nodes = self.nodes.borrow();
            for i in 0..end {
                reaches[i] = nodes[i].requires_grad
                    && (wanted[i] || nodes[i].op.inputs().iter().any(|&j| reaches[j]));
            }
        }

        let mut grads: Vec<Option<usize>> = vec![None; end];
        if reaches[target.id] {
            let seed = Tensor::full(target.value().shape().to_vec(), T::one());
            grads[target.id] = Some(self.constant(seed).id);
        }

        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            if !reaches[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            let inputs = op.inputs();
            if inputs.is_empty() {
                continue;
            }
            let contributions = self.backward_rule(i, &op, self.var(g), request.record_backward)?;
            for (input, contribution) in inputs.into_iter().zip(contributions) {
                if !reaches[input] {
                    continue;
                }
                let Some(c) = contribution else { continue };
                grads[input] = Some(match grads[input] {
                    None => c.id,
                    Some(prev) => self.var(prev).add(c)?.id,
                });
            }
        }

        request
            .with_respect_to
            .iter()
            .map(|v| {
                let id = if v.id < end { grads[v.id] } else { None };
                Ok(match id {
                    Some(id) if request.record_backward => self.var(id),
                    Some(id) => self.var(id).detach(),
                    None => self.constant(Tensor::zeros(v.value().shape().to_vec())),
                })
            })
            .collect()
    }

    /// Vector-Jacobian products of node `id` for each of its inputs.
    fn backward_rule<'t>(
        &'t self,
        id: usize,
        op: &Op<T>,
        g: Var<'t, T>,
        record: bool,
    ) -> Result<Vec<Option<Var<'t, T>>>> {
        // Saved values enter the backward graph either live (record) or as
        // detached constants.
        let saved = |i: usize| -> Var<'t, T> {
            if record {
                self.var(i)
            } else {
                self.var(i).detach()
            }
        };
        let out = || saved(id);
        let shape_of = |i: usize| self.value_of(i).shape().to_vec();
        use Op::*;
        let r = match *op {
            Leaf(_) => vec![],
            Add(_, _) => vec![Some(g), Some(g)],
            Sub(_, _) => vec![Some(g), Some(g.scale(-T::one()))],
            Mul(a, b) => vec![Some(g.mul(saved(b))?), Some(g.mul(saved(a))?)],
            Scale(_, c) => vec![Some(g.scale(c))],
            MatMul { a, b, ta, tb } => {
                let (va, vb) = (saved(a), saved(b));
                let da = if ta { vb.matmul_t(g, tb, true)? } else { g.matmul_t(vb, false, !tb)? };
                let db = if tb { g.matmul_t(va, true, ta)? } else { va.matmul_t(g, !ta, false)? };
                vec![Some(da), Some(db)]
            }
            AddBias { .. } => vec![Some(g), Some(g.bias_grad()?)],
            BiasGrad(x) => vec![Some(g.broadcast_axis1(&shape_of(x))?)],
            BroadcastAxis1(_) => vec![Some(g.bias_grad()?)],
            Relu(x) => {
                let mask = self.value_of(x).map(|v| if v > T::zero() { T::one() } else { T::zero() });
                vec![Some(g.mul(self.constant(mask))?)]
            }
            Conv2d { x, w, stride, pad } => {
                let xs = shape_of(x);
                let ws = shape_of(w);
                vec![
                    Some(g.conv2d_input(saved(w), stride, pad, (xs[2], xs[3]))?),
                    Some(saved(x).conv2d_weight(g, stride, pad, (ws[2], ws[3]))?),
                ]
            }
            Conv2dInput { g: gi, w, stride, pad, .. } => {
                let ws = shape_of(w);
                vec![
                    Some(g.conv2d(saved(w), stride, pad)?),
                    Some(g.conv2d_weight(saved(gi), stride, pad, (ws[2], ws[3]))?),
                ]
            }
            Conv2dWeight { x, g: gi, stride, pad, .. } => {
                let xs = shape_of(x);
                vec![
                    Some(saved(gi).conv2d_input(g, stride, pad, (xs[2], xs[3]))?),
                    Some(saved(x).conv2d(g, stride, pad)?),
                ]
            }
            AvgPool { x, kernel, stride } => vec![Some(g.avgpool_backward(kernel, stride, &shape_of(x))?)],
            AvgPoolBackward { kernel, stride, .. } => vec![Some(g.avgpool(kernel, stride)?)],
            GlobalAvgPool(x) => {
                let xs = shape_of(x);
                vec![Some(g.global_avgpool_backward((xs[2], xs[3]))?)]
            }
            GlobalAvgPoolBackward(_) => vec![Some(g.global_avgpool()?)],
            Reshape(x) => vec![Some(g.reshape(shape_of(x))?)],
            SumAll(x) => vec![Some(g.broadcast_all(&shape_of(x))?)],
            BroadcastAll(_) => vec![Some(g.sum_all())],
            SumLast(x) => {
                let n = *shape_of(x).last().expect("rank-2 input");
                vec![Some(g.broadcast_last(n)?)]
            }
            BroadcastLast(_) => vec![Some(g.sum_last()?)],
            LogSoftmax(_) => {
                // g - softmax(x) * Σ_k g_k
                let n = *shape_of(id).last().expect("rank-2 input");
                let probs = out().exp();
                let total = g.sum_last()?.broadcast_last(n)?;
                vec![Some(g.sub(probs.mul(total)?)?)]
            }
            Exp(_) => vec![Some(g.mul(out())?)],
            Sqrt(_) => vec![Some(g.mul(out().recip().scale(T::of(0.5)))?)],
            Recip(_) => {
                let o = out();
                vec![Some(g.mul(o.mul(o)?.scale(-T::one()))?)]
            }
        };
        Ok(r)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, no gradient flow.
    pub fn detach(self) -> Var<'t, T> {
        let value = self.value();
        self.tape.push_rc(Op::Leaf(LeafKind::Constant), value)
    }

    fn unary(self, op: Op<T>, value: Tensor<T>) -> Var<'t, T> {
        self.tape.push(op, value)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().add(&other.value())?;
        Ok(self.unary(Op::Add(self.id, other.id), v))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().sub(&other.value())?;
        Ok(self.unary(Op::Sub(self.id, other.id), v))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().mul(&other.value())?;
        Ok(self.unary(Op::Mul(self.id, other.id), v))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let v = self.value().scale(c);
        self.unary(Op::Scale(self.id, c), v)
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.mul(self)
    }

    pub fn matmul_t(self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let v = self.value().matmul_t(&other.value(), ta, tb)?;
        Ok(self.unary(
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            v,
        ))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(other, false, false)
    }

    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().add_bias(&bias.value())?;
        Ok(self.unary(Op::AddBias { x: self.id, bias: bias.id }, v))
    }

    pub fn bias_grad(self) -> Result<Var<'t, T>> {
        let v = self.value().bias_grad()?;
        Ok(self.unary(Op::BiasGrad(self.id), v))
    }

    pub fn broadcast_axis1(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().broadcast_axis1(shape)?;
        Ok(self.unary(Op::BroadcastAxis1(self.id), v))
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.value().relu();
        self.unary(Op::Relu(self.id), v)
    }

    pub fn conv2d(self, w: Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let v = self.value().conv2d(&w.value(), None, stride, pad)?;
        Ok(self.unary(
            Op::Conv2d {
                x: self.id,
                w: w.id,
                stride,
                pad,
            },
            v,
        ))
    }

    /// `self` is an output-shaped gradient; maps it back to input shape.
    pub fn conv2d_input(self, w: Var<'t, T>, stride: usize, pad: usize, hw: (usize, usize)) -> Result<Var<'t, T>> {
        let v = self.value().conv2d_input_grad(&w.value(), stride, pad, hw)?;
        Ok(self.unary(
            Op::Conv2dInput {
                g: self.id,
                w: w.id,
                stride,
                pad,
            },
            v,
        ))
    }

    /// `self` is the convolution input, `g` an output-shaped gradient.
    pub fn conv2d_weight(self, g: Var<'t, T>, stride: usize, pad: usize, khw: (usize, usize)) -> Result<Var<'t, T>> {
        let v = self.value().conv2d_weight_grad(&g.value(), stride, pad, khw)?;
        Ok(self.unary(
            Op::Conv2dWeight {
                x: self.id,
                g: g.id,
                stride,
                pad,
            },
            v,
        ))
    }

    pub fn avgpool(self, kernel: usize, stride: usize) -> Result<Var<'t, T>> {
        let v = self.value().avgpool2d(kernel, stride)?;
        Ok(self.unary(
            Op::AvgPool {
                x: self.id,
                kernel,
                stride,
            },
            v,
        ))
    }

    pub fn avgpool_backward(self, kernel: usize, stride: usize, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value().avgpool2d_backward(kernel, stride, shape)?;
        Ok(self.unary(
            Op::AvgPoolBackward {
                g: self.id,
                kernel,
                stride,
            },
            v,
        ))
    }

    pub fn global_avgpool(self) -> Result<Var<'t, T>> {
        let v = self.value().global_avgpool()?;
        Ok(self.unary(Op::GlobalAvgPool(self.id), v))
    }

    pub fn global_avgpool_backward(self, hw: (usize, usize)) -> Result<Var<'t, T>> {
        let v = self.value().global_avgpool_backward(hw)?;
        Ok(self.unary(Op::GlobalAvgPoolBackward(self.id), v))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), v))
    }

    /// Collapses every axis after the first: `B×… → B×D`.
    pub fn flatten(self) -> Result<Var<'t, T>> {
        let s = self.shape();
        let rest: usize = s[1..].iter().product();
        self.reshape(vec![s[0], rest])
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum_all());
        self.unary(Op::SumAll(self.id), v)
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum_all().scale(T::one() / T::of(n as f64))
    }

    pub fn broadcast_all(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value();
        if !value.is_scalar() {
            return Err(Error::shape("broadcast_all", format!("scalar required, got {:?}", value.shape())));
        }
        let v = Tensor::full(shape.to_vec(), value.data()[0]);
        Ok(self.unary(Op::BroadcastAll(self.id), v))
    }

    /// Row sums of a `B×K` matrix, kept as `B×1`.
    pub fn sum_last(self) -> Result<Var<'t, T>> {
        let value = self.value();
        if value.rank() != 2 {
            return Err(Error::shape("sum_last", format!("rank-2 input required, got {:?}", value.shape())));
        }
        let b = value.shape()[0];
        let v = value.sum_axis(1)?.reshape(vec![b, 1])?;
        Ok(self.unary(Op::SumLast(self.id), v))
    }

    /// Repeats a `B×1` column `n` times: `B×1 → B×n`.
    pub fn broadcast_last(self, n: usize) -> Result<Var<'t, T>> {
        let value = self.value();
        if value.rank() != 2 || value.shape()[1] != 1 {
            return Err(Error::shape("broadcast_last", format!("B×1 input required, got {:?}", value.shape())));
        }
        let b = value.shape()[0];
        let data = value.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        let v = Tensor::new(vec![b, n], data)?;
        Ok(self.unary(Op::BroadcastLast(self.id), v))
    }

    /// Row-wise log-softmax of a `B×K` matrix.
    pub fn log_softmax(self) -> Result<Var<'t, T>> {
        let value = self.value();
        if value.rank() != 2 {
            return Err(Error::shape("log_softmax", format!("rank-2 input required, got {:?}", value.shape())));
        }
        let v = value.log_softmax(1)?;
        Ok(self.unary(Op::LogSoftmax(self.id), v))
    }

    pub fn exp(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.exp());
        self.unary(Op::Exp(self.id), v)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.sqrt());
        self.unary(Op::Sqrt(self.id), v)
    }

    pub fn recip(self) -> Var<'t, T> {
        let v = self.value().map(|x| x.recip());
        self.unary(Op::Recip(self.id), v)
    }

    /// `∂self/∂wrt` for scalar `self`; shorthand for a one-node request.
    pub fn grad_wrt(self, wrt: &[Var<'t, T>], record_backward: bool) -> Result<Vec<Var<'t, T>>> {
        self.tape.grad(&GradientRequest {
            target: self,
            with_respect_to: wrt.to_vec(),
            record_backward,
        })
    }
}
