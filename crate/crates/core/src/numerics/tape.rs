//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar result walks the record in reverse and
//! returns one gradient per node. The tape is single-writer; independent
//! forward/backward passes should use independent tapes.

use std::cell::RefCell;
use std::ops;
use std::sync::Arc;

use super::{NumericsError, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    ScaleBy(usize, usize),
    AddScalar(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    LogFloor(usize, f64),
    Exp(usize),
    Recip(usize),
    MaxConst(usize, f64),
    Sum(usize),
    Broadcast(usize),
    Transpose(usize),
    Inverse(usize),
    Trace(usize),
    ConcatRows(Vec<usize>),
    BlockMatVec(Arc<Vec<Tensor>>, usize),
    SoftmaxCols(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

/// Gradients of a scalar with respect to every tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[var.id];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn wrt_all(&self, vars: &[Var<'_>]) -> Vec<Tensor> {
        vars.iter().map(|v| self.wrt(*v)).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf (trainable parameter).
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Tensor,
    ) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        let rg = self.needs(&[a, b]);
        self.push(value, op, rg)
    }

    /// Stack vars vertically (equal column counts).
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            Tensor::concat_rows(&refs)
        };
        let rg = self.needs(&ids);
        self.push(value, Op::ConcatRows(ids), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, NumericsError> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape != [1, 1] {
            return Err(NumericsError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    let mut acc = |id: usize, t: Tensor| accumulate(nodes, grads, id, t);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            acc(*a, g.matmul_t(val(*b)));
            acc(*b, val(*a).t_matmul(g));
        }
        Op::Add(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            acc(*a, g.hadamard(val(*b)));
            acc(*b, g.hadamard(val(*a)));
        }
        Op::AddBias(x, b) => {
            acc(*x, g.clone());
            let sums = (0..g.rows()).map(|i| (0..g.cols()).map(|j| g.get(i, j)).sum()).collect();
            acc(*b, Tensor::vector(sums));
        }
        Op::ScaleBy(a, s) => {
            acc(*a, g.scale(val(*s).item()));
            acc(*s, Tensor::scalar(g.hadamard(val(*a)).sum()));
        }
        Op::AddScalar(a, s) => {
            acc(*a, g.clone());
            acc(*s, Tensor::scalar(g.sum()));
        }
        Op::Scale(a, c) => acc(*a, g.scale(*c)),
        Op::Offset(a) => acc(*a, g.clone()),
        Op::Relu(a) => acc(*a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
        Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |g, y| g * y * (1.0 - y))),
        Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |g, y| g * (1.0 - y * y))),
        Op::Abs(a) => acc(*a, g.zip_map(val(*a), |g, x| g * sign(x))),
        Op::LogFloor(a, floor) => {
            acc(*a, g.zip_map(val(*a), |g, x| if x > *floor { g / x } else { 0.0 }))
        }
        Op::Exp(a) => acc(*a, g.hadamard(&node.value)),
        Op::Recip(a) => acc(*a, g.zip_map(&node.value, |g, y| -g * y * y)),
        Op::MaxConst(a, c) => acc(*a, g.zip_map(val(*a), |g, x| if x > *c { g } else { 0.0 })),
        Op::Sum(a) => {
            let [r, c] = val(*a).shape();
            acc(*a, Tensor::filled(r, c, g.item()));
        }
        Op::Broadcast(s) => acc(*s, Tensor::scalar(g.sum())),
        Op::Transpose(a) => acc(*a, g.transpose()),
        Op::Inverse(a) => {
            // d(A⁻¹) = −A⁻¹ dA A⁻¹  ⇒  Ā = −A⁻ᵀ Ḡ A⁻ᵀ
            let inv = &node.value;
            acc(*a, inv.t_matmul(g).matmul_t(inv).scale(-1.0));
        }
        Op::Trace(a) => acc(*a, Tensor::identity(val(*a).rows()).scale(g.item())),
        Op::ConcatRows(parts) => {
            let cols = g.cols();
            let mut offset = 0;
            for &p in parts {
                let rows = val(p).rows();
                let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                acc(p, Tensor::new(rows, cols, slice));
                offset += rows;
            }
        }
        Op::BlockMatVec(mats, x) => {
            let xv = val(*x);
            let mut out = Tensor::zeros(xv.rows(), xv.cols());
            for (j, m) in mats.iter().enumerate() {
                let gj = Tensor::vector(g.column(j));
                let back = m.t_matmul(&gj);
                for i in 0..out.rows() {
                    out.set(i, j, back.get(i, 0));
                }
            }
            acc(*x, out);
        }
        Op::SoftmaxCols(a) => {
            let y = &node.value;
            let mut out = Tensor::zeros(y.rows(), y.cols());
            for j in 0..y.cols() {
                let dot: f64 = (0..y.rows()).map(|i| g.get(i, j) * y.get(i, j)).sum();
                for i in 0..y.rows() {
                    out.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                }
            }
            acc(*a, out);
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::MatMul(self.id, rhs.id), Tensor::matmul)
    }

    pub fn hadamard(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Mul(self.id, rhs.id), Tensor::hadamard)
    }

    /// Adds column vector `bias` to every column.
    pub fn add_bias(self, bias: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, bias.id, Op::AddBias(self.id, bias.id), |x, b| {
            assert_eq!(
                [x.rows(), 1],
                b.shape(),
                "shape mismatch in add_bias: {:?} + {:?}",
                x.shape(),
                b.shape()
            );
            let mut out = x.clone();
            for i in 0..x.rows() {
                for j in 0..x.cols() {
                    out.set(i, j, x.get(i, j) + b.get(i, 0));
                }
            }
            out
        })
    }

    /// Multiplies every element by the 1x1 var `s`.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, s.id, Op::ScaleBy(self.id, s.id), |a, s| a.scale(s.item()))
    }

    /// Divides every element by the 1x1 var `s`.
    pub fn div_by(self, s: Var<'t>) -> Var<'t> {
        self.scale_by(s.recip())
    }

    /// Adds the 1x1 var `s` to every element.
    pub fn add_scalar(self, s: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, s.id, Op::AddScalar(self.id, s.id), |a, s| {
            let s = s.item();
            a.map(|v| v + s)
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |a| a.scale(c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Offset(self.id), |a| a.map(|v| v + c))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Relu(self.id), |a| a.map(|v| v.max(0.0)))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sigmoid(self.id), |a| a.map(|v| 1.0 / (1.0 + (-v).exp())))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn abs(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Abs(self.id), |a| a.map(f64::abs))
    }

    /// `ln(max(x, floor))`.
    pub fn log_floor(self, floor: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::LogFloor(self.id, floor), |a| a.map(|v| v.max(floor).ln()))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn recip(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Recip(self.id), |a| a.map(|v| 1.0 / v))
    }

    /// Elementwise `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn max_const(self, floor: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::MaxConst(self.id, floor), |a| a.map(|v| v.max(floor)))
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sum(self.id), |a| Tensor::scalar(a.sum()))
    }

    pub fn norm1(self) -> Var<'t> {
        self.abs().sum()
    }

    pub fn norm2sq(self) -> Var<'t> {
        self.hadamard(self).sum()
    }

    /// Expands a 1x1 var to a `rows x cols` tensor.
    pub fn broadcast(self, rows: usize, cols: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::Broadcast(self.id), |a| Tensor::filled(rows, cols, a.item()))
    }

    pub fn transpose(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn trace(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Trace(self.id), |a| Tensor::scalar(a.trace()))
    }

    pub fn inverse(self) -> Result<Var<'t>, NumericsError> {
        let inv = self.tape.nodes.borrow()[self.id].value.inverse()?;
        let rg = self.tape.needs(&[self.id]);
        Ok(self.tape.push(inv, Op::Inverse(self.id), rg))
    }

    /// Column-wise products `out[:, j] = mats[j] · self[:, j]` with constant matrices.
    pub fn block_matvec(self, mats: Arc<Vec<Tensor>>) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            assert_eq!(mats.len(), x.cols(), "shape mismatch: one matrix per column required");
            let rows = mats.first().map_or(0, Tensor::rows);
            let mut out = Tensor::zeros(rows, x.cols());
            for (j, m) in mats.iter().enumerate() {
                let prod = m.matmul(&Tensor::vector(x.column(j)));
                for i in 0..rows {
                    out.set(i, j, prod.get(i, 0));
                }
            }
            out
        };
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::BlockMatVec(mats, self.id), rg)
    }

    /// Softmax over each column.
    pub fn softmax_cols(self) -> Var<'t> {
        self.tape.unary(self.id, Op::SoftmaxCols(self.id), softmax_cols)
    }
}

pub(crate) fn softmax_cols(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), a.cols());
    for j in 0..a.cols() {
        let col = a.column(j);
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (i, e) in exps.iter().enumerate() {
            out.set(i, j, e / total);
        }
    }
    out
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Add(self.id, rhs.id), Tensor::add)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Sub(self.id, rhs.id), Tensor::sub)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    /// Elementwise product.
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.hadamard(rhs)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
