//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive application in creation order, which
//! is already a topological order of the computation graph. Values are
//! computed eagerly when a primitive is applied; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients into every node that depends
//! on a `requires_grad` leaf.
//!
//! Broadcasting is limited to leading batch dimensions: the right operand of
//! `add`/`mul` may have a shape equal to a suffix of the left operand's shape,
//! and the right operand of `matmul` may be a single 2-D matrix shared by
//! every batch entry of the left operand. Anything else needs an explicit
//! reshape.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{
    axis_split, gemm_acc, gemm_nt_acc, gemm_tn_acc, permute, split_last, transpose_last2, Float,
    Tensor,
};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Softmax(usize),
    LogSoftmax(usize),
    RmsNorm { x: usize, gamma: usize, eps: f64 },
    Gelu(usize),
    Embedding { table: usize, ids: Rc<[u32]> },
    Reshape(usize, Vec<usize>),
    Transpose(usize),
    Permute { x: usize, perm: Vec<usize> },
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Log(usize),
    Exp(usize),
    Concat { xs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize, end: usize },
    Rope { x: usize, positions: Rc<[usize]>, base: f64 },
}

impl Op {
    fn operands(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::RmsNorm { x, gamma, .. } => vec![*x, *gamma],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Gelu(x)
            | Op::Reshape(x, _)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumLast(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::Rope { x, .. } => vec![*x],
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications. Confined to one thread.
pub struct Tape<F: Float = f32> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Float = f32> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Float> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable input.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    /// Records a constant input.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor<F>, op: Op, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor<F> {
        self.nodes.borrow()[id].value.clone()
    }

    fn apply(&self, op: Op) -> Result<Var<'_, F>> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let value = eval_op(&op, &nodes)?;
            let rg = op.operands().iter().any(|&i| nodes[i].requires_grad);
            (value, rg)
        };
        Ok(self.push(value, op, requires_grad))
    }

    /// Recomputes every non-leaf entry from its recorded operands and checks
    /// that the result is bit-identical to the stored value.
    pub fn replay_matches(&self) -> Result<bool> {
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let again = eval_op(&node.op, &nodes)?;
            if !again.bit_eq(&node.value) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Reverse pass from a 0-dimensional loss.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Tape("loss was recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        if loss.id >= nodes.len() {
            return Err(Error::Tape(format!("unknown node {}", loss.id)));
        }
        if nodes[loss.id].value.ndim() != 0 {
            return Err(Error::Contract(format!(
                "backward needs a 0-dimensional loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(F::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_op(&node.op, &node.value, &g, &nodes, &mut grads)?;
        }
        let shapes = nodes
            .iter()
            .map(|n| (n.requires_grad, n.value.shape().to_vec()))
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<F: Float = f32> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<(bool, Vec<usize>)>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of the loss with respect to `var`. Nodes that require grad
    /// but were not reached by the loss get zeros.
    pub fn get(&self, var: Var<'_, F>) -> Option<Tensor<F>> {
        let (rg, shape) = self.shapes.get(var.id)?;
        if !rg {
            return None;
        }
        Some(
            self.grads[var.id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(shape)),
        )
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<Tensor<F>> {
        let (rg, shape) = self.shapes.get(var.id)?;
        if !rg {
            return None;
        }
        Some(
            self.grads[var.id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(shape)),
        )
    }
}

impl<'t, F: Float> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Tensor<F> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t, F>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Tape("operands recorded on different tapes".into()))
        }
    }

    /// `[..., m, k] × [k, n]` (shared right matrix) or `[..., m, k] × [..., k, n]`.
    pub fn matmul(self, rhs: Var<'t, F>) -> Result<Self> {
        self.same_tape(&rhs)?;
        self.tape.apply(Op::MatMul(self.id, rhs.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Var<'t, F>) -> Result<Self> {
        self.same_tape(&rhs)?;
        self.tape.apply(Op::Add(self.id, rhs.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, rhs: Var<'t, F>) -> Result<Self> {
        self.add(rhs.scale(-1.0)?)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Var<'t, F>) -> Result<Self> {
        self.same_tape(&rhs)?;
        self.tape.apply(Op::Mul(self.id, rhs.id))
    }

    pub fn scale(self, c: f64) -> Result<Self> {
        self.tape.apply(Op::Scale(self.id, c))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Self> {
        self.tape.apply(Op::Softmax(self.id))
    }

    pub fn log_softmax(self) -> Result<Self> {
        self.tape.apply(Op::LogSoftmax(self.id))
    }

    /// `x / sqrt(mean(x²) + eps) * gamma` over the last axis.
    pub fn rms_norm(self, gamma: Var<'t, F>, eps: f64) -> Result<Self> {
        self.same_tape(&gamma)?;
        self.tape.apply(Op::RmsNorm {
            x: self.id,
            gamma: gamma.id,
            eps,
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Self> {
        self.tape.apply(Op::Gelu(self.id))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(self, ids: &[u32]) -> Result<Self> {
        self.tape.apply(Op::Embedding {
            table: self.id,
            ids: ids.into(),
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        self.tape.apply(Op::Reshape(self.id, shape.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Self> {
        self.tape.apply(Op::Transpose(self.id))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Self> {
        self.tape.apply(Op::Permute {
            x: self.id,
            perm: perm.to_vec(),
        })
    }

    /// Sum of all elements, as a 0-dimensional tensor.
    pub fn sum(self) -> Result<Self> {
        self.tape.apply(Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Self> {
        self.tape.apply(Op::Mean(self.id))
    }

    /// Sum over the last axis.
    pub fn sum_last(self) -> Result<Self> {
        self.tape.apply(Op::SumLast(self.id))
    }

    pub fn log(self) -> Result<Self> {
        self.tape.apply(Op::Log(self.id))
    }

    pub fn exp(self) -> Result<Self> {
        self.tape.apply(Op::Exp(self.id))
    }

    pub fn concat(parts: &[Var<'t, F>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        for p in &parts[1..] {
            first.same_tape(p)?;
        }
        first.tape.apply(Op::Concat {
            xs: parts.iter().map(|p| p.id).collect(),
            axis,
        })
    }

    /// Elements `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Self> {
        self.tape.apply(Op::Slice {
            x: self.id,
            axis,
            start,
            end,
        })
    }

    /// Rotary position embedding over `[..., seq, d_head]`; pair `(2i, 2i+1)`
    /// at position `p` is rotated by `p * base^(-2i/d_head)`.
    pub fn rope(self, positions: &[usize], base: f64) -> Result<Self> {
        self.tape.apply(Op::Rope {
            x: self.id,
            positions: positions.into(),
            base,
        })
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn eval_op<F: Float>(op: &Op, nodes: &[Node<F>]) -> Result<Tensor<F>> {
    let v = |i: usize| &nodes[i].value;
    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => matmul_fwd(v(*a), v(*b)),
        Op::Add(a, b) => binary_fwd("add", v(*a), v(*b), |x, y| x + y),
        Op::Mul(a, b) => binary_fwd("mul", v(*a), v(*b), |x, y| x * y),
        Op::Scale(x, c) => {
            let c = F::of(*c);
            Ok(v(*x).map(|e| e * c))
        }
        Op::Softmax(x) => Ok(softmax_fwd(v(*x))),
        Op::LogSoftmax(x) => Ok(log_softmax_fwd(v(*x))),
        Op::RmsNorm { x, gamma, eps } => rms_norm_fwd(v(*x), v(*gamma), *eps),
        Op::Gelu(x) => Ok(v(*x).map(gelu)),
        Op::Embedding { table, ids } => embedding_fwd(v(*table), ids),
        Op::Reshape(x, shape) => v(*x).reshape(shape),
        Op::Transpose(x) => {
            if v(*x).ndim() < 2 {
                return Err(Error::Shape {
                    op: "transpose",
                    lhs: v(*x).shape().to_vec(),
                    rhs: vec![],
                });
            }
            Ok(transpose_last2(v(*x)))
        }
        Op::Permute { x, perm } => {
            let nd = v(*x).ndim();
            let mut seen = vec![false; nd];
            if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::Shape {
                    op: "permute",
                    lhs: v(*x).shape().to_vec(),
                    rhs: perm.clone(),
                });
            }
            Ok(permute(v(*x), perm))
        }
        Op::Sum(x) => Ok(Tensor::scalar(v(*x).data().iter().copied().sum())),
        Op::Mean(x) => {
            let t = v(*x);
            let s: F = t.data().iter().copied().sum();
            Ok(Tensor::scalar(s / F::of(t.numel() as f64)))
        }
        Op::SumLast(x) => {
            let t = v(*x);
            let (rows, n) = split_last(t.shape());
            let out: Vec<F> = (0..rows)
                .map(|r| t.data()[r * n..(r + 1) * n].iter().copied().sum())
                .collect();
            let shape = t.shape()[..t.ndim().saturating_sub(1)].to_vec();
            Tensor::new(shape, out)
        }
        Op::Log(x) => Ok(v(*x).map(|e| e.ln())),
        Op::Exp(x) => Ok(v(*x).map(|e| e.exp())),
        Op::Concat { xs, axis } => {
            let parts: Vec<&Tensor<F>> = xs.iter().map(|&i| v(i)).collect();
            concat_fwd(&parts, *axis)
        }
        Op::Slice { x, axis, start, end } => slice_fwd(v(*x), *axis, *start, *end),
        Op::Rope { x, positions, base } => rope_fwd(v(*x), positions, *base, false),
    }
}

fn matmul_fwd<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(err());
    }
    let (m, k) = (a.shape()[a.ndim() - 2], a.shape()[a.ndim() - 1]);
    let (k2, n) = (b.shape()[b.ndim() - 2], b.shape()[b.ndim() - 1]);
    if k != k2 {
        return Err(err());
    }
    let lead = &a.shape()[..a.ndim() - 2];
    let mut shape = lead.to_vec();
    shape.extend([m, n]);
    let batch: usize = lead.iter().product();
    let mut out = vec![F::zero(); batch * m * n];
    if b.ndim() == 2 {
        gemm_acc(a.data(), b.data(), &mut out, batch * m, k, n);
    } else {
        if b.shape()[..b.ndim() - 2] != *lead {
            return Err(err());
        }
        for i in 0..batch {
            gemm_acc(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
    }
    Tensor::new(shape, out)
}

fn binary_fwd<F: Float>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    if !broadcast_ok(a.shape(), b.shape()) {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let nb = b.numel();
    let bd = b.data();
    let out = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[i % nb]))
        .collect();
    Tensor::new(a.shape().to_vec(), out)
}

fn softmax_fwd<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let (rows, n) = split_last(x.shape());
    let mut out = x.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for e in row.iter_mut() {
            *e = (*e - max).exp();
            sum += *e;
        }
        for e in row.iter_mut() {
            *e = *e / sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn log_softmax_fwd<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let (rows, n) = split_last(x.shape());
    let mut out = x.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * n..(r + 1) * n];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for &e in row.iter() {
            sum += (e - max).exp();
        }
        let lse = max + sum.ln();
        for e in row.iter_mut() {
            *e = *e - lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn rms_norm_fwd<F: Float>(x: &Tensor<F>, gamma: &Tensor<F>, eps: f64) -> Result<Tensor<F>> {
    let (rows, n) = split_last(x.shape());
    if gamma.shape() != [n] {
        return Err(Error::Shape {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let g = gamma.data();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * n..(r + 1) * n];
        let inv = rms_inv(row, eps);
        for (e, &gi) in row.iter_mut().zip(g) {
            *e = *e * inv * gi;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn rms_inv<F: Float>(row: &[F], eps: f64) -> F {
    let mut ss = F::zero();
    for &e in row {
        ss += e * e;
    }
    let ms = ss / F::of(row.len() as f64);
    F::one() / (ms + F::of(eps)).sqrt()
}

fn gelu<F: Float>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_grad<F: Float>(x: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (x + F::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

fn embedding_fwd<F: Float>(table: &Tensor<F>, ids: &[u32]) -> Result<Tensor<F>> {
    if table.ndim() != 2 {
        return Err(Error::Shape {
            op: "embedding",
            lhs: table.shape().to_vec(),
            rhs: vec![ids.len()],
        });
    }
    let (vocab, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id = id as usize;
        if id >= vocab {
            return Err(Error::Input(format!("token id {id} outside vocab of {vocab}")));
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Tensor::new(vec![ids.len(), d], out)
}

fn concat_fwd<F: Float>(parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    let first = parts[0];
    if axis >= first.ndim() {
        return Err(Error::Shape {
            op: "concat",
            lhs: first.shape().to_vec(),
            rhs: vec![axis],
        });
    }
    for p in parts {
        let ok = p.ndim() == first.ndim()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::Shape {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

fn slice_fwd<F: Float>(x: &Tensor<F>, axis: usize, start: usize, end: usize) -> Result<Tensor<F>> {
    if axis >= x.ndim() || start > end || end > x.shape()[axis] {
        return Err(Error::Shape {
            op: "slice",
            lhs: x.shape().to_vec(),
            rhs: vec![axis, start, end],
        });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    Tensor::new(shape, out)
}

fn rope_fwd<F: Float>(x: &Tensor<F>, positions: &[usize], base: f64, inverse: bool) -> Result<Tensor<F>> {
    let nd = x.ndim();
    if nd < 2 || x.shape()[nd - 2] != positions.len() {
        return Err(Error::Shape {
            op: "rope",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len()],
        });
    }
    let d = x.shape()[nd - 1];
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("rotary embedding needs an even head dim, got {d}")));
    }
    let seq = positions.len();
    // angle table, computed in binary64
    let mut cs = Vec::with_capacity(seq * d / 2);
    for &p in positions {
        for i in 0..d / 2 {
            let theta = p as f64 * base.powf(-2.0 * i as f64 / d as f64);
            let s = if inverse { -theta.sin() } else { theta.sin() };
            cs.push((F::of(theta.cos()), F::of(s)));
        }
    }
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(d).enumerate() {
        let s = r % seq;
        for i in 0..d / 2 {
            let (c, sn) = cs[s * d / 2 + i];
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * c - x1 * sn;
            row[2 * i + 1] = x0 * sn + x1 * c;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn accumulate<F: Float>(grads: &mut [Option<Tensor<F>>], id: usize, g: Tensor<F>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sums `g` (shaped like the broadcast result) down to `shape`, a suffix.
fn reduce_to<F: Float>(g: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![F::zero(); n];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::new(shape.to_vec(), out).expect("suffix shape")
}

fn backward_op<F: Float>(
    op: &Op,
    out: &Tensor<F>,
    g: &Tensor<F>,
    nodes: &[Node<F>],
    grads: &mut [Option<Tensor<F>>],
) -> Result<()> {
    let v = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (v(*a), v(*b));
            let (m, k) = (av.shape()[av.ndim() - 2], av.shape()[av.ndim() - 1]);
            let n = bv.shape()[bv.ndim() - 1];
            let batch = av.numel() / (m * k).max(1);
            if rg(*a) {
                let mut da = vec![F::zero(); av.numel()];
                if bv.ndim() == 2 {
                    gemm_nt_acc(g.data(), bv.data(), &mut da, batch * m, n, k);
                } else {
                    for i in 0..batch {
                        gemm_nt_acc(
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            }
            if rg(*b) {
                let mut db = vec![F::zero(); bv.numel()];
                if bv.ndim() == 2 {
                    gemm_tn_acc(av.data(), g.data(), &mut db, batch * m, k, n);
                } else {
                    for i in 0..batch {
                        gemm_tn_acc(
                            &av.data()[i * m * k..(i + 1) * m * k],
                            &g.data()[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
        }
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(grads, *a, g.clone());
            }
            if rg(*b) {
                accumulate(grads, *b, reduce_to(g, v(*b).shape()));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (v(*a), v(*b));
            if rg(*a) {
                let nb = bv.numel();
                let da: Vec<F> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * bv.data()[i % nb])
                    .collect();
                accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            }
            if rg(*b) {
                let full = g.zip_map(av, |gi, ai| gi * ai);
                accumulate(grads, *b, reduce_to(&full, bv.shape()));
            }
        }
        Op::Scale(x, c) => {
            let c = F::of(*c);
            accumulate(grads, *x, g.map(|e| e * c));
        }
        Op::Softmax(x) => {
            let (rows, n) = split_last(out.shape());
            let mut dx = vec![F::zero(); out.numel()];
            for r in 0..rows {
                let y = &out.data()[r * n..(r + 1) * n];
                let gy = &g.data()[r * n..(r + 1) * n];
                let mut dot = F::zero();
                for (a, b) in y.iter().zip(gy) {
                    dot += *a * *b;
                }
                for j in 0..n {
                    dx[r * n + j] = y[j] * (gy[j] - dot);
                }
            }
            accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
        }
        Op::LogSoftmax(x) => {
            let (rows, n) = split_last(out.shape());
            let mut dx = vec![F::zero(); out.numel()];
            for r in 0..rows {
                let y = &out.data()[r * n..(r + 1) * n];
                let gy = &g.data()[r * n..(r + 1) * n];
                let gsum: F = gy.iter().copied().sum();
                for j in 0..n {
                    dx[r * n + j] = gy[j] - y[j].exp() * gsum;
                }
            }
            accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
        }
        Op::RmsNorm { x, gamma, eps } => {
            let (xv, gv) = (v(*x), v(*gamma));
            let (rows, n) = split_last(xv.shape());
            let mut dx = vec![F::zero(); xv.numel()];
            let mut dg = vec![F::zero(); n];
            let nf = F::of(n as f64);
            for r in 0..rows {
                let xr = &xv.data()[r * n..(r + 1) * n];
                let gr = &g.data()[r * n..(r + 1) * n];
                let inv = rms_inv(xr, *eps);
                let mut dot = F::zero();
                for j in 0..n {
                    let xh = xr[j] * inv;
                    dg[j] += gr[j] * xh;
                    dot += gr[j] * gv.data()[j] * xh;
                }
                let mean = dot / nf;
                for j in 0..n {
                    let xh = xr[j] * inv;
                    dx[r * n + j] = inv * (gr[j] * gv.data()[j] - xh * mean);
                }
            }
            if rg(*x) {
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            if rg(*gamma) {
                accumulate(grads, *gamma, Tensor::new(vec![n], dg)?);
            }
        }
        Op::Gelu(x) => {
            let dx = v(*x).zip_map(g, |xi, gi| gelu_grad(xi) * gi);
            accumulate(grads, *x, dx);
        }
        Op::Embedding { table, ids } => {
            let tv = v(*table);
            let d = tv.shape()[1];
            let mut dt = vec![F::zero(); tv.numel()];
            for (r, &id) in ids.iter().enumerate() {
                let id = id as usize;
                for j in 0..d {
                    dt[id * d + j] += g.data()[r * d + j];
                }
            }
            accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), dt)?);
        }
        Op::Reshape(x, _) => accumulate(grads, *x, g.reshape(v(*x).shape())?),
        Op::Transpose(x) => accumulate(grads, *x, transpose_last2(g)),
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accumulate(grads, *x, permute(g, &inv));
        }
        Op::Sum(x) => accumulate(grads, *x, Tensor::full(v(*x).shape(), g.item())),
        Op::Mean(x) => {
            let n = F::of(v(*x).numel() as f64);
            accumulate(grads, *x, Tensor::full(v(*x).shape(), g.item() / n));
        }
        Op::SumLast(x) => {
            let xv = v(*x);
            let (_, n) = split_last(xv.shape());
            let dx: Vec<F> = (0..xv.numel()).map(|i| g.data()[i / n]).collect();
            accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
        }
        Op::Log(x) => accumulate(grads, *x, g.zip_map(v(*x), |gi, xi| gi / xi)),
        Op::Exp(x) => accumulate(grads, *x, g.zip_map(out, |gi, yi| gi * yi)),
        Op::Concat { xs, axis } => {
            let mut offset = 0;
            for &i in xs {
                let len = v(i).shape()[*axis];
                if rg(i) {
                    accumulate(grads, i, slice_fwd(g, *axis, offset, offset + len)?);
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start, end } => {
            let xv = v(*x);
            let (outer, len, inner) = axis_split(xv.shape(), *axis);
            let mut dx = vec![F::zero(); xv.numel()];
            let w = (end - start) * inner;
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                dx[dst..dst + w].copy_from_slice(&g.data()[o * w..(o + 1) * w]);
            }
            accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
        }
        Op::Rope { x, positions, base } => {
            accumulate(grads, *x, rope_fwd(g, positions, *base, true)?);
        }
    }
    Ok(())
}

/// Compares reverse-mode gradients of `f` against fourth-order central
/// differences with step `epsilon`, both in binary64. Returns the maximum over all input elements of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<Fun>(f: Fun, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    Fun: for<'a> Fn(&'a Tape<f64>, &[Var<'a, f64>]) -> Result<Var<'a, f64>>,
{
    if epsilon <= 0.0 {
        return Err(Error::Contract("epsilon must be positive".into()));
    }
    let tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if !out.shape().is_empty() {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::<f64>::new();
        let vs: Vec<_> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        Ok(f(&t, &vs)?.value().item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("inputs require grad");
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            let mut at = |h: f64| -> Result<f64> {
                work[i].data_mut()[j] = orig + h;
                eval(&work)
            };
            let near = at(epsilon)? - at(-epsilon)?;
            let far = at(2.0 * epsilon)? - at(-2.0 * epsilon)?;
            work[i].data_mut()[j] = orig;
            let numeric = (8.0 * near - far) / (12.0 * epsilon);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::<f64>::new();
        let i2 = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t64(&[2, 2], &[1.5, -2.0, 0.25, 7.0]));
        assert_eq!(i2.matmul(a).unwrap().value(), a.value());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3], &[0.0, 0.0, 0.0]));
        let y = x.softmax().unwrap().value();
        for &e in y.data() {
            assert!((e - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rms_norm_hand_value() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2], &[3.0, 4.0]));
        let g = tape.constant(t64(&[2], &[1.0, 1.0]));
        let y = x.rms_norm(g, 0.0).unwrap().value();
        let d = 12.5f64.sqrt();
        assert!((y.data()[0] - 3.0 / d).abs() < 1e-15);
        assert!((y.data()[1] - 4.0 / d).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match a.matmul(b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(a.add(c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[1.0; 4]);
    }

    #[test]
    fn unreached_leaf_gets_zeros() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::ones(&[3]));
        let c = tape.param(Tensor::scalar(2.0));
        let loss = c.scale(3.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0; 3]);
        assert_eq!(grads.get(c).unwrap().item(), 3.0);
    }

    #[test]
    fn loss_from_other_tape_is_rejected() {
        let t1 = Tape::<f32>::new();
        let t2 = Tape::<f32>::new();
        let x = t2.param(Tensor::ones(&[2]));
        let loss = x.sum().unwrap();
        assert!(matches!(t1.backward(loss), Err(Error::Tape(_))));
        let v = t2.param(Tensor::ones(&[2]));
        assert!(matches!(t2.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn square_grad_check() {
        let err = grad_check(
            |_, v| v[0].mul(v[0])?.sum(),
            &[Tensor::scalar(3.0)],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_rejects_vector_output() {
        let r = grad_check(|_, v| Ok(v[0]), &[Tensor::zeros(&[2])], 1e-3);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn replay_is_bit_exact() {
        let tape = Tape::<f32>::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.0, 2.0, -3.0]).unwrap());
        let w = tape.param(Tensor::new(vec![3, 2], vec![0.5, 0.1, -0.7, 0.2, 0.9, -1.1]).unwrap());
        let y = x.matmul(w).unwrap().gelu().unwrap().softmax().unwrap();
        let _ = y.log().unwrap().sum().unwrap();
        assert!(tape.replay_matches().unwrap());
    }
}
