//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s during a
//! forward pass. [`Tape::backward`] replays the record in reverse, returns
//! the gradient of a scalar loss with respect to every leaf that requires a
//! gradient, and resets the tape for the next step. Vars from an earlier
//! generation are rejected with [`Error::Detached`].

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Backward rule of a recorded operation.
///
/// Returns one entry per input: the gradient of the loss with respect to
/// that input (same length as the input), or `None` when `needs_grad[i]` is
/// false. Implementations must be deterministic.
pub trait Backward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    generation: Cell<u64>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    generation: u64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}@{}", self.index, self.generation)
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug)]
pub struct Gradients {
    generation: u64,
    by_leaf: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for `leaf`, zero-filled when the loss does not depend on it.
    pub fn get(&self, leaf: Var<'_>) -> Result<&Tensor> {
        if leaf.generation != self.generation {
            return Err(Error::Detached);
        }
        self.by_leaf.get(&leaf.index).ok_or_else(|| {
            Error::InvalidArgument(format!("{leaf:?} is not a leaf that requires grad"))
        })
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameters, or tensors under gradient check).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), None, false)
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn record<'t>(
        &'t self,
        value: Tensor,
        inputs: &[Var<'t>],
        rule: impl Backward + 'static,
    ) -> Result<Var<'t>> {
        for v in inputs {
            self.check(*v)?;
        }
        Ok(self.record_unchecked(value, inputs, Box::new(rule)))
    }

    fn record_unchecked<'t>(
        &'t self,
        value: Tensor,
        inputs: &[Var<'t>],
        rule: Box<dyn Backward>,
    ) -> Var<'t> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.index].requires_grad)
        };
        let rule = requires_grad.then_some(rule);
        self.push(
            value,
            inputs.iter().map(|v| v.index).collect(),
            rule,
            requires_grad,
        )
    }

    fn push(
        &self,
        value: Tensor,
        inputs: Vec<usize>,
        rule: Option<Box<dyn Backward>>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs,
            rule,
            requires_grad,
        });
        Var {
            tape: self,
            index: nodes.len() - 1,
            generation: self.generation.get(),
        }
    }

    fn check(&self, v: Var<'_>) -> Result<()> {
        if !std::ptr::eq(v.tape, self) || v.generation != self.generation.get() {
            return Err(Error::Detached);
        }
        Ok(())
    }

    /// Discards everything recorded so far.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.generation.set(self.generation.get() + 1);
    }

    /// Gradients of the scalar `loss` with respect to every differentiable
    /// leaf. The tape is reset afterwards.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let generation = self.generation.get();
        self.reset();

        let root = &nodes[loss.index];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let node = &nodes[i];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&j| &nodes[j].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| nodes[j].requires_grad)
                .collect();
            let input_grads = rule.backward(&inputs, &node.value, &grad_out, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&j, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                debug_assert_eq!(g.len(), nodes[j].value.len());
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut by_leaf = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.rule.is_none() && node.inputs.is_empty() && node.requires_grad {
                let shape = node.value.shape();
                let g = match grads[i].take() {
                    Some(g) => Tensor::new(shape, g)?,
                    None => Tensor::zeros(shape),
                };
                by_leaf.insert(i, g);
            }
        }
        Ok(Gradients {
            generation,
            by_leaf,
        })
    }
}

// ---------------------------------------------------------------------------
// Primitive operations

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Axes {
    All,
    Some(Vec<usize>),
}

struct BinaryRule {
    kind: BinaryKind,
}

impl Backward for BinaryRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0], inputs[1]);
        // Index into an operand that may be a broadcast scalar.
        let at = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
        let reduce_to = |t: &Tensor, full: Vec<f64>| -> Vec<f64> {
            if t.len() == 1 && full.len() != 1 {
                vec![full.iter().sum()]
            } else {
                full
            }
        };
        let n = g.len();
        let da = needs[0].then(|| {
            let full: Vec<f64> = match self.kind {
                BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                BinaryKind::Mul => (0..n).map(|i| g[i] * at(b, i)).collect(),
                BinaryKind::Div => (0..n).map(|i| g[i] / at(b, i)).collect(),
            };
            reduce_to(a, full)
        });
        let db = needs[1].then(|| {
            let full: Vec<f64> = match self.kind {
                BinaryKind::Add => g.to_vec(),
                BinaryKind::Sub => g.iter().map(|x| -x).collect(),
                BinaryKind::Mul => (0..n).map(|i| g[i] * at(a, i)).collect(),
                BinaryKind::Div => (0..n)
                    .map(|i| {
                        let bv = at(b, i);
                        -g[i] * at(a, i) / (bv * bv)
                    })
                    .collect(),
            };
            reduce_to(b, full)
        });
        vec![da, db]
    }
}

struct MatMulRule;

impl Backward for MatMulRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let da = needs[0].then(|| {
            let mut out = vec![0.0; m * k];
            gemm(m, n, k, g, false, b.data(), true, &mut out, false);
            out
        });
        let db = needs[1].then(|| {
            let mut out = vec![0.0; k * n];
            gemm(k, m, n, a.data(), true, g, false, &mut out, false);
            out
        });
        vec![da, db]
    }
}

struct TransposeRule;

impl Backward for TransposeRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        // g is c×r; its transpose is r×c.
        vec![Some(transpose_data(g, c, r))]
    }
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

struct ReshapeRule;

impl Backward for ReshapeRule {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

struct ReduceRule {
    kind: ReduceKind,
    /// Output flat index for each input element.
    out_index: Vec<usize>,
    /// Input element receiving the gradient, per output (max only).
    argmax: Vec<usize>,
    count: usize,
}

impl Backward for ReduceRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let n = inputs[0].len();
        let dx = match self.kind {
            ReduceKind::Sum => self.out_index.iter().map(|&o| g[o]).collect(),
            ReduceKind::Mean => {
                let scale = 1.0 / self.count as f64;
                self.out_index.iter().map(|&o| g[o] * scale).collect()
            }
            ReduceKind::Max => {
                let mut dx = vec![0.0; n];
                for (o, &i) in self.argmax.iter().enumerate() {
                    dx[i] += g[o];
                }
                dx
            }
        };
        vec![Some(dx)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Softplus,
    Scale(f64),
}

struct UnaryRule {
    kind: UnaryKind,
}

impl Backward for UnaryRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        g: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0].data();
        let y = output.data();
        let dx = match self.kind {
            UnaryKind::Relu => (0..g.len())
                .map(|i| if x[i] > 0.0 { g[i] } else { 0.0 })
                .collect(),
            UnaryKind::Sigmoid => (0..g.len()).map(|i| g[i] * y[i] * (1.0 - y[i])).collect(),
            UnaryKind::Softplus => (0..g.len()).map(|i| g[i] * sigmoid(x[i])).collect(),
            UnaryKind::Scale(c) => g.iter().map(|v| v * c).collect(),
        };
        vec![Some(dx)]
    }
}

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct BiasAddRule {
    channels: usize,
}

impl Backward for BiasAddRule {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let dx = needs[0].then(|| g.to_vec());
        let db = needs[1].then(|| {
            let mut db = vec![0.0; self.channels];
            for row in g.chunks(self.channels) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            db
        });
        vec![dx, db]
    }
}

struct SelectRule {
    index: usize,
}

impl Backward for SelectRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; inputs[0].len()];
        let start = self.index * g.len();
        dx[start..start + g.len()].copy_from_slice(g);
        vec![Some(dx)]
    }
}

struct LogSoftmaxRule;

impl Backward for LogSoftmaxRule {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        output: &Tensor,
        g: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let cols = *output.shape().last().unwrap();
        let mut dx = vec![0.0; g.len()];
        for ((dr, gr), yr) in dx
            .chunks_mut(cols)
            .zip(g.chunks(cols))
            .zip(output.data().chunks(cols))
        {
            let gsum: f64 = gr.iter().sum();
            for j in 0..cols {
                dr[j] = gr[j] - yr[j].exp() * gsum;
            }
        }
        vec![Some(dx)]
    }
}

/// Output shape and input→output index map of a reduction.
fn reduction_plan(shape: &[usize], axes: &[usize], keep_dims: bool) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let reduced: Vec<bool> = (0..rank).map(|d| axes.contains(&d)).collect();
    let kept_shape: Vec<usize> = (0..rank)
        .map(|d| if reduced[d] { 1 } else { shape[d] })
        .collect();
    let mut out_strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        out_strides[d] = if reduced[d] { 0 } else { s };
        s *= kept_shape[d];
    }
    let n: usize = shape.iter().product();
    let mut out_index = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        out_index.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let out_shape = if keep_dims {
        kept_shape
    } else {
        (0..rank)
            .filter(|d| !reduced[*d])
            .map(|d| shape[d])
            .collect()
    };
    (out_shape, out_index)
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.index].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.index].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.index].requires_grad
    }

    fn op(self, value: Tensor, inputs: &[Var<'t>], rule: impl Backward + 'static) -> Var<'t> {
        self.tape.record_unchecked(value, inputs, Box::new(rule))
    }

    fn check_same_tape(self, other: Var<'t>) -> Result<()> {
        self.tape.check(self)?;
        self.tape.check(other)
    }

    /// Elementwise arithmetic. Shapes must match unless one side is rank 0.
    pub fn elementwise(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.check_same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let a_scalar = a.rank() == 0;
        let b_scalar = b.rank() == 0;
        if a.shape() != b.shape() && !a_scalar && !b_scalar {
            return Err(Error::shape(format!(
                "{kind:?}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let shape = if a_scalar { b.shape() } else { a.shape() };
        let n: usize = shape.iter().product();
        let at = |t: &Tensor, i: usize| if t.rank() == 0 { t.data()[0] } else { t.data()[i] };
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let data = (0..n).map(|i| f(at(&a, i), at(&b, i))).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.op(value, &[self, other], BinaryRule { kind }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, BinaryKind::Div)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(format!(
                "matmul: {:?} · {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.op(value, &[self, other], MatMulRule))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.tape.check(self)?;
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::shape(format!("transpose of {:?}", a.shape())));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let value = Tensor::new(&[c, r], transpose_data(a.data(), r, c))?;
        Ok(self.op(value, &[self], TransposeRule))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.check(self)?;
        let value = self.value().reshape(shape)?;
        Ok(self.op(value, &[self], ReshapeRule))
    }

    pub fn reduce(self, kind: ReduceKind, axes: Axes, keep_dims: bool) -> Result<Var<'t>> {
        self.tape.check(self)?;
        let x = self.value();
        let rank = x.rank();
        let mut axes = match axes {
            Axes::All => (0..rank).collect(),
            Axes::Some(a) => a,
        };
        axes.sort_unstable();
        axes.dedup();
        if let Some(&axis) = axes.iter().find(|&&a| a >= rank) {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let (out_shape, out_index) = reduction_plan(x.shape(), &axes, keep_dims);
        let out_len: usize = out_shape.iter().product();
        let count = x.len() / out_len;
        let mut out = vec![0.0; out_len];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for (v, &o) in x.data().iter().zip(&out_index) {
                    out[o] += v;
                }
                if kind == ReduceKind::Mean {
                    out.iter_mut().for_each(|v| *v /= count as f64);
                }
            }
            ReduceKind::Max => {
                out.fill(f64::NEG_INFINITY);
                argmax = vec![usize::MAX; out_len];
                // Row-major scan with strict comparison keeps the first maximum.
                for (i, (&v, &o)) in x.data().iter().zip(&out_index).enumerate() {
                    if argmax[o] == usize::MAX || v > out[o] {
                        out[o] = v;
                        argmax[o] = i;
                    }
                }
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.op(
            value,
            &[self],
            ReduceRule {
                kind,
                out_index,
                argmax,
                count,
            },
        ))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, Axes::All, false)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean, Axes::All, false)
    }

    fn unary(self, kind: UnaryKind) -> Result<Var<'t>> {
        self.tape.check(self)?;
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            UnaryKind::Relu => Box::new(|x: f64| if x > 0.0 { x } else { 0.0 }),
            UnaryKind::Sigmoid => Box::new(sigmoid),
            UnaryKind::Softplus => Box::new(softplus),
            UnaryKind::Scale(c) => Box::new(move |x| x * c),
        };
        let value = self.value().map(f);
        Ok(self.op(value, &[self], UnaryRule { kind }))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Softplus)
    }

    /// Multiplication by a constant.
    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.unary(UnaryKind::Scale(factor))
    }

    /// Adds `bias[C]` to every length-C row of the last axis.
    pub fn bias_add(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(bias)?;
        let (x, b) = (self.value(), bias.value());
        let c = x.shape().last().copied().unwrap_or(0);
        if b.shape() != [c] {
            return Err(Error::shape(format!(
                "bias {:?} for input {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut out = x.into_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
        let value = Tensor::new(&self.shape(), out)?;
        Ok(self.op(value, &[self, bias], BiasAddRule { channels: c }))
    }

    /// Element `index` along the leading axis.
    pub fn select(self, index: usize) -> Result<Var<'t>> {
        self.tape.check(self)?;
        let value = self.value().index_first(index)?;
        Ok(self.op(value, &[self], SelectRule { index }))
    }

    /// Row-wise log-softmax of a 2-D tensor.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        self.tape.check(self)?;
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::shape(format!("log_softmax of {:?}", x.shape())));
        }
        let cols = x.shape()[1];
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.op(value, &[self], LogSoftmaxRule))
    }
}

// ---------------------------------------------------------------------------
// Finite-difference verification

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// central differences with step `eps`:
/// `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    const MAX_ELEMENTS: usize = 10_000;
    if x.len() > MAX_ELEMENTS {
        return Err(Error::InvalidArgument(format!(
            "grad_check supports at most {MAX_ELEMENTS} elements, got {}",
            x.len()
        )));
    }
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(&tape, leaf)?;
    let value = loss.value();
    if !value.all_finite() {
        return Err(Error::NonFinite("grad_check: f(x)".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic = grads.get(leaf)?.clone();

    let probe = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = f(&tape, tape.constant(t))?.value();
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check: probe".into()));
        }
        Ok(y)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (probe(plus)? - probe(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
