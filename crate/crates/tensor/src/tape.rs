use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{shape_err, Result, TensorError};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stabilizer inside `l2_norm`: `sqrt(sum(x^2) + L2_EPS)`. Keeps the
/// derivative finite at the zero vector.
pub const L2_EPS: f64 = 1e-12;

/// A differentiable operation defined outside this crate.
///
/// The tape stores the op next to its inputs and output and calls
/// [`CustomOp::backward`] during the reverse sweep.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one gradient per input, same shapes as the
    /// inputs.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Square(usize),
    Sqrt(usize),
    Sum { x: usize, axis: usize },
    Mean { x: usize, axis: usize },
    SumAll(usize),
    MeanAll(usize),
    L2Norm { x: usize, axis: usize },
    Softmax { x: usize, axis: usize },
    MatMul(usize, usize),
    Permute { x: usize, perm: Vec<usize> },
    Reshape(usize),
    Conv2d { input: usize, kernel: usize, bias: usize, stride: usize },
    Custom { op: Box<dyn CustomOp<T>>, inputs: Vec<usize> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::L2Norm { .. } => "l2_norm",
            Op::Softmax { .. } => "softmax",
            Op::MatMul(..) => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Square(x)
            | Op::Sqrt(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Reshape(x) => vec![*x],
            Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::L2Norm { x, .. }
            | Op::Softmax { x, .. }
            | Op::Permute { x, .. } => vec![*x],
            Op::Conv2d { input, kernel, bias, .. } => vec![*input, *kernel, *bias],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated adjoint; only kept for leaves that require gradients.
    grad: Option<Vec<T>>,
}

/// Where a non-finite value first appeared while the tape was being built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonFinite {
    pub node: usize,
    pub op: &'static str,
}

impl fmt::Display for NonFinite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "first non-finite value produced by `{}` (node {})", self.op, self.node)
    }
}

/// Define-by-run record of executed operations.
///
/// Nodes are appended in execution order, so every operation's inputs
/// precede it and the reverse sweep is a single backwards pass over the
/// node list. A tape built with [`Tape::no_grad`] evaluates values but records
/// no operations.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    non_finite: RefCell<Option<NonFinite>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            non_finite: RefCell::new(None),
        }
    }

    /// Inference-only tape: values are computed, nothing is recorded for
    /// differentiation, and [`Var::backward`] fails.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded differentiable operations (leaves excluded).
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn first_non_finite(&self) -> Option<NonFinite> {
        self.non_finite.borrow().clone()
    }

    /// Registers a trainable input.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Registers an input that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let requires_grad = requires_grad && self.recording;
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if !value.is_finite() {
            let mut nf = self.non_finite.borrow_mut();
            if nf.is_none() {
                *nf = Some(NonFinite { node: id, op: op.name() });
            }
        }
        // Without recording there is nothing to differentiate; drop the op.
        let op = if self.recording { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        self.recording && ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = self.requires(&op.inputs());
        self.push(value, op, rg)
    }

    /// Accumulated gradient of a leaf created with `requires_grad`. Leaves the
    /// loss never reached report zeros. `None` for constants and interior
    /// nodes.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        if !matches!(node.op, Op::Leaf) || !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &node.grad {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        })
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn backward_from(&self, loss: usize) -> Result<()> {
        if !self.recording {
            return Err(TensorError::NotRecording);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss].value.shape().to_vec();
        if nodes[loss].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; loss + 1];
        adj[loss] = Some(Tensor::ones(loss_shape));
        let mut leaf_grads: Vec<(usize, Tensor<T>)> = Vec::new();

        for id in (0..=loss).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((id, g));
                continue;
            }
            for (input, grad) in input_grads(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                adj[input] = Some(match adj[input].take() {
                    None => grad,
                    Some(acc) => add_same(&acc, &grad),
                });
            }
        }
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            let slot = &mut nodes[id].grad;
            match slot {
                None => *slot = Some(g.into_vec()),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
            }
        }
        Ok(())
    }

    /// Read access to a node's value without cloning the handle.
    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        let nodes: Ref<'_, Vec<Node<T>>> = self.nodes.borrow();
        f(&nodes[id].value)
    }
}

fn add_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
    )
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Adjoints of one node's inputs given the adjoint of its output.
fn input_grads<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |i: usize| &nodes[i].value;
    let need = |i: usize| nodes[i].requires_grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, kernels::unbroadcast(g.data().to_vec(), val(*a).shape())),
            (*b, kernels::unbroadcast(g.data().to_vec(), val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, kernels::unbroadcast(g.data().to_vec(), val(*a).shape())),
            (
                *b,
                kernels::unbroadcast(g.data().iter().map(|&v| -v).collect(), val(*b).shape()),
            ),
        ],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let n = g.numel();
            let (da, db) = (va.data(), vb.data());
            let mut out = Vec::new();
            if need(*a) {
                let ga = (0..n).map(|i| g.data()[i] * db[i % db.len()]).collect();
                out.push((*a, kernels::unbroadcast(ga, va.shape())));
            }
            if need(*b) {
                let gb = (0..n).map(|i| g.data()[i] * da[i % da.len()]).collect();
                out.push((*b, kernels::unbroadcast(gb, vb.shape())));
            }
            out
        }
        Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
        Op::AddScalar(x) => vec![(*x, g.clone())],
        Op::Relu(x) => vec![(
            *x,
            zip_map(g, val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() }),
        )],
        Op::Sigmoid(x) => vec![(*x, zip_map(g, y, |gv, yv| gv * yv * (T::one() - yv)))],
        Op::Square(x) => vec![(*x, zip_map(g, val(*x), |gv, xv| gv * (xv + xv)))],
        Op::Sqrt(x) => vec![(*x, zip_map(g, y, |gv, yv| gv / (yv + yv)))],
        Op::Sum { x, axis } => vec![(*x, kernels::expand_axis(g, val(*x).shape(), *axis, T::one()))],
        Op::Mean { x, axis } => {
            let shape = val(*x).shape();
            let f = T::one() / T::lit(shape[*axis] as f64);
            vec![(*x, kernels::expand_axis(g, shape, *axis, f))]
        }
        Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.data()[0]))],
        Op::MeanAll(x) => {
            let vx = val(*x);
            let f = g.data()[0] / T::lit(vx.numel() as f64);
            vec![(*x, Tensor::full(vx.shape().to_vec(), f))]
        }
        Op::L2Norm { x, axis } => vec![(*x, kernels::l2_norm_backward(val(*x), y, g, *axis))],
        Op::Softmax { x, axis } => vec![(*x, kernels::softmax_backward(y, g, *axis))],
        Op::MatMul(a, b) => {
            let (da, db) = kernels::matmul_backward(val(*a), val(*b), g, need(*a), need(*b));
            da.map(|t| (*a, t)).into_iter().chain(db.map(|t| (*b, t))).collect()
        }
        Op::Permute { x, perm } => vec![(*x, kernels::permute(g, &kernels::inverse_perm(perm)))],
        Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape().to_vec()).expect("same numel"))],
        Op::Conv2d { input, kernel, bias, stride } => {
            let grads = kernels::conv2d_backward(
                val(*input),
                val(*kernel),
                val(*bias),
                *stride,
                g,
                [need(*input), need(*kernel), need(*bias)],
            );
            [(*input, grads.input), (*kernel, grads.kernel), (*bias, grads.bias)]
                .into_iter()
                .filter_map(|(i, t)| t.map(|t| (i, t)))
                .collect()
        }
        Op::Custom { op, inputs } => {
            let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            inputs.iter().copied().zip(op.backward(&values, y, g)).collect()
        }
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |v| v.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    /// Accumulates `d self / d leaf` into every reachable leaf created with
    /// `requires_grad`. Calling it again accumulates further.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    fn binary(
        &self,
        other: &Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        make: fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let out = kernels::zip_broadcast(op, &self.value(), &other.value(), f)?;
        Ok(self.tape.record(out, make(self.id, other.id)))
    }

    /// Elementwise sum; see the crate docs for the broadcasting rules.
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * c);
        self.tape.record(out, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let out = self.value().map(|v| v + c);
        self.tape.record(out, Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Var<'t, T> {
        let out = self.value().map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.record(out, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let out = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        self.tape.record(out, Op::Sigmoid(self.id))
    }

    pub fn square(&self) -> Var<'t, T> {
        let out = self.value().map(|v| v * v);
        self.tape.record(out, Op::Square(self.id))
    }

    pub fn sqrt(&self) -> Var<'t, T> {
        let out = self.value().map(|v| v.sqrt());
        self.tape.record(out, Op::Sqrt(self.id))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&self, axis: usize) -> Result<Var<'t, T>> {
        let out = kernels::sum_axis(&self.value(), axis)?;
        Ok(self.tape.record(out, Op::Sum { x: self.id, axis }))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let summed = kernels::sum_axis(&x, axis)?;
        let n = T::lit(x.shape()[axis] as f64);
        Ok(self.tape.record(summed.map(|v| v / n), Op::Mean { x: self.id, axis }))
    }

    pub fn sum_all(&self) -> Var<'t, T> {
        let total = self.tape.with_value(self.id, |v| v.data().iter().copied().sum());
        self.tape.record(Tensor::scalar(total), Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var<'t, T> {
        let (total, n): (T, usize) = self
            .tape
            .with_value(self.id, |v| (v.data().iter().copied().sum(), v.numel()));
        self.tape
            .record(Tensor::scalar(total / T::lit(n as f64)), Op::MeanAll(self.id))
    }

    /// `sqrt(sum(x^2, axis) + 1e-12)`, removing `axis`.
    pub fn l2_norm(&self, axis: usize) -> Result<Var<'t, T>> {
        let out = kernels::l2_norm_axis(&self.value(), axis, T::lit(L2_EPS))?;
        Ok(self.tape.record(out, Op::L2Norm { x: self.id, axis }))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let out = kernels::softmax(&self.value(), axis)?;
        Ok(self.tape.record(out, Op::Softmax { x: self.id, axis }))
    }

    /// Batched product `(..., P, Q) x (..., Q, R)`. The batch extents of one
    /// operand must equal, or be a trailing suffix of, the other's.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other)?;
        let out = kernels::matmul(&self.value(), &other.value())?;
        Ok(self.tape.record(out, Op::MatMul(self.id, other.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        kernels::check_perm(perm, x.rank())?;
        let out = kernels::permute(&x, perm);
        Ok(self.tape.record(
            out,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let rank = self.tape.with_value(self.id, |v| v.rank());
        if rank < 2 {
            return Err(shape_err("transpose", format!("rank {rank} < 2")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id)))
    }

    /// Valid (unpadded) cross-correlation of an NCHW input with an OIHW kernel.
    pub fn conv2d(&self, kernel: &Var<'t, T>, bias: &Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        self.same_tape(kernel)?;
        self.same_tape(bias)?;
        let out = kernels::conv2d(&self.value(), &kernel.value(), &bias.value(), stride)?;
        Ok(self.tape.record(
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.id,
                stride,
            },
        ))
    }

    /// Records an externally defined op whose forward value is `output`.
    pub fn custom(op: Box<dyn CustomOp<T>>, inputs: &[Var<'t, T>], output: Tensor<T>) -> Result<Var<'t, T>> {
        let Some(first) = inputs.first() else {
            return Err(shape_err("custom", "custom op needs at least one input"));
        };
        for v in inputs {
            first.same_tape(v)?;
        }
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(first.tape.record(output, Op::Custom { op, inputs: ids }))
    }
}
