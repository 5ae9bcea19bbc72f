//! Tape-based reverse-mode differentiation over a closed set of dense ops.
//!
//! Every op evaluates eagerly, stores its value on the [`Tape`] and returns a
//! [`Var`] handle. [`Tape::backward`] walks the tape once in reverse and
//! accumulates gradients into every node that requires them, in a fixed
//! order, so repeated runs are bit-identical.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Operation identifiers, used for fault injection and introspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    OrderInvariantMatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Transpose,
    Reshape,
    Sum,
    Mean,
    Relu,
    Gelu,
    Softmax,
    LayerNorm,
    CrossEntropy,
    SliceLast,
    ConcatLast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Product {
    Packed,
    OrderInvariant,
    Direct,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        product: Product,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Relu(usize),
    Gelu(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SliceLast {
        x: usize,
        start: usize,
    },
    ConcatLast(Vec<usize>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul {
                product: Product::OrderInvariant,
                ..
            } => OpKind::OrderInvariantMatMul,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::SliceLast { .. } => OpKind::SliceLast,
            Op::ConcatLast(_) => OpKind::ConcatLast,
        }
    }
}

/// One recorded operation: its identifier, input references (inside the op),
/// the saved activations its backward rule needs, and its output value.
#[derive(Debug)]
pub struct TapeNode {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

impl TapeNode {
    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Scales the gradient one op's backward rule sends to one of its inputs.
/// Only used to prove that gradient checks catch broken rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fault {
    pub op: OpKind,
    pub input: usize,
    pub factor: f64,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<TapeNode>,
    grads: Vec<Option<Tensor>>,
    state_marks: Vec<usize>,
    fault: Option<Fault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            state_marks: Vec::new(),
            fault: None,
        }
    }

    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    fn node(&self, v: Var) -> Result<&TapeNode> {
        if v.tape != self.id {
            return Err(Error::Tape(format!(
                "variable {} belongs to tape {} but was used on tape {}",
                v.index, v.tape, self.id
            )));
        }
        self.nodes
            .get(v.index)
            .ok_or_else(|| Error::Tape(format!("variable {} is not on this tape", v.index)))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(TapeNode {
            op,
            value,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("variable from another tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.node(v).ok()?;
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Records `v` as an interaction-state buffer (attention scores or a
    /// graph adjacency operator) for allocation accounting.
    pub fn mark_state(&mut self, v: Var) {
        self.state_marks.push(v.index);
    }

    /// Entry counts of every buffer marked with [`Tape::mark_state`].
    pub fn state_entries(&self) -> Vec<usize> {
        self.state_marks.iter().map(|&i| self.nodes[i].value.numel()).collect()
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|&v| self.nodes[v.index].requires_grad)
    }

    // ---- ops ----------------------------------------------------------

    fn matmul_impl(&mut self, a: Var, b: Var, product: Product) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let out = match product {
            Product::OrderInvariant => kernels::order_invariant_matmul(m, k, n, va, vb),
            Product::Direct => kernels::direct_matmul(m, k, n, va, vb),
            Product::Packed => {
                let mut out = vec![0.0; m * n];
                kernels::gemm(m, k, n, va, false, vb, false, &mut out, false);
                out
            }
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Op::MatMul {
                a: a.index,
                b: b.index,
                product,
            },
            Tensor::from_parts(vec![m, n], out),
            rg,
        ))
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, Product::Packed)
    }

    /// Matrix product whose result is bit-identical under any permutation of
    /// the shared axis. Same values as [`Tape::matmul`] up to rounding.
    pub fn matmul_order_invariant(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, Product::OrderInvariant)
    }

    /// Matrix product through an unpacked row-major loop. Slower than
    /// [`Tape::matmul`] for large operands but free of per-call setup, so
    /// its cost on small operands tracks `m·k·n`.
    pub fn matmul_direct(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, Product::Direct)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let value = ta.zip_map(tb, f)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(op(a.index, b.index), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Scale(a.index, factor), value, rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        if t.ndim() != 2 {
            return Err(Error::InvalidTensor(format!(
                "transpose needs a 2-D tensor, got {:?}",
                t.shape()
            )));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Transpose(a.index), Tensor::from_parts(vec![c, r], out), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(a)?.value.reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Reshape(a.index), value, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.sum();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Sum(a.index), Tensor::scalar(s), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let m = t.sum() / t.numel() as f64;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Mean(a.index), Tensor::scalar(m), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| x.max(0.0));
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Relu(a.index), value, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.node(a)?.value.map(|x| {
            let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Gelu(a.index), value, rg))
    }

    /// Softmax along `axis`, with the per-slice maximum subtracted first.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = &self.node(a)?.value;
        if axis >= t.ndim() {
            return Err(Error::InvalidTensor(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    denom += e;
                }
                for j in 0..len {
                    out[at(j)] /= denom;
                }
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Softmax { x: a.index, axis }, value, rg))
    }

    /// Layer normalization over the last axis, population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidTensor(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let tx = &self.node(x)?.value;
        let (tg, tb) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        let c = *tx.shape().last().unwrap_or(&1);
        if tx.ndim() == 0 || tg.shape() != [c] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        if tb.shape() != [c] {
            return Err(Error::shape("layer_norm", tx.shape(), tb.shape()));
        }
        let rows = tx.numel() / c;
        let (xd, gd, bd) = (tx.data(), tg.data(), tb.data());
        let mut normalized = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                normalized[r * c + j] = h;
                out[r * c + j] = gd[j] * h + bd[j];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm {
                x: x.index,
                gamma: gamma.index,
                beta: beta.index,
                normalized,
                rstd,
            },
            value,
            rg,
        ))
    }

    /// Mean cross-entropy of row-wise logits `[P×K]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = &self.node(logits)?.value;
        if t.ndim() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let (p, k) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::InvalidTensor(format!(
                "target class {bad} out of range for {k} classes"
            )));
        }
        let z = t.data();
        let mut probs = vec![0.0; z.len()];
        let mut total = 0.0;
        for r in 0..p {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + denom.ln();
            total += lse - row[targets[r]];
            for j in 0..k {
                probs[r * k + j] = (row[j] - max).exp() / denom;
            }
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.index,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(total / p as f64),
            rg,
        ))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.node(a)?.value;
        let c = *t.shape().last().unwrap_or(&1);
        if t.ndim() == 0 || len == 0 || start + len > c {
            return Err(Error::InvalidTensor(format!(
                "slice [{start}, {}) out of range for shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let rows = t.numel() / c;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::SliceLast { x: a.index, start }, Tensor::from_parts(shape, out), rg))
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of zero tensors".into()))?;
        let lead = {
            let s = self.node(*first)?.value.shape();
            if s.is_empty() {
                return Err(Error::InvalidTensor("concat of scalars".into()));
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.node(p)?.value.shape();
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat_last", self.value(*first).shape(), s));
            }
            widths.push(s[lead.len()]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_grad(parts);
        Ok(self.push(
            Op::ConcatLast(parts.iter().map(|v| v.index).collect()),
            Tensor::from_parts(shape, out),
            rg,
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Populates the gradient of scalar `loss` for every node on the tape
    /// that requires one. Replaces the gradients of any previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.node(loss)?;
        if !node.value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let (shape, requires_grad) = (node.value.shape().to_vec(), node.requires_grad);
        self.grads = vec![None; self.nodes.len()];
        if !requires_grad {
            return Ok(());
        }
        self.grads[loss.index] = Some(Tensor::from_parts(shape, vec![1.0]));
        for i in (0..=loss.index).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, input: usize) -> bool {
        self.nodes[input].requires_grad
    }

    fn accumulate(&mut self, kind: OpKind, slot: usize, input: usize, mut contrib: Vec<f64>) {
        if let Some(f) = self.fault {
            if f.op == kind && f.input == slot {
                contrib.iter_mut().for_each(|x| *x *= f.factor);
            }
        }
        match &mut self.grads[input] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[input].value.shape().to_vec();
                *slot = Some(Tensor::from_parts(shape, contrib));
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let kind = self.nodes[i].op.kind();
        let gd = g.data();
        let mut out: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, .. } => {
                let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, false, nodes[b].value.data(), true, &mut da, false);
                    out.push((0, a, da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, nodes[a].value.data(), true, gd, false, &mut db, false);
                    out.push((1, b, db));
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    out.push((0, a, gd.to_vec()));
                }
                if self.wants(b) {
                    out.push((1, b, gd.to_vec()));
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    out.push((0, a, gd.to_vec()));
                }
                if self.wants(b) {
                    out.push((1, b, gd.iter().map(|x| -x).collect()));
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                if self.wants(a) {
                    out.push((0, a, gd.iter().zip(vb).map(|(g, y)| g * y).collect()));
                }
                if self.wants(b) {
                    out.push((1, b, gd.iter().zip(va).map(|(g, x)| g * x).collect()));
                }
            }
            &Op::Scale(a, c) => {
                if self.wants(a) {
                    out.push((0, a, gd.iter().map(|g| g * c).collect()));
                }
            }
            &Op::Transpose(a) => {
                if self.wants(a) {
                    let s = nodes[a].value.shape();
                    let (r, c) = (s[0], s[1]);
                    let mut da = vec![0.0; r * c];
                    for x in 0..r {
                        for y in 0..c {
                            da[x * c + y] = gd[y * r + x];
                        }
                    }
                    out.push((0, a, da));
                }
            }
            &Op::Reshape(a) => {
                if self.wants(a) {
                    out.push((0, a, gd.to_vec()));
                }
            }
            &Op::Sum(a) => {
                if self.wants(a) {
                    out.push((0, a, vec![gd[0]; nodes[a].value.numel()]));
                }
            }
            &Op::Mean(a) => {
                if self.wants(a) {
                    let n = nodes[a].value.numel();
                    out.push((0, a, vec![gd[0] / n as f64; n]));
                }
            }
            &Op::Relu(a) => {
                if self.wants(a) {
                    let x = nodes[a].value.data();
                    out.push((
                        0,
                        a,
                        gd.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect(),
                    ));
                }
            }
            &Op::Gelu(a) => {
                if self.wants(a) {
                    let x = nodes[a].value.data();
                    let da = gd
                        .iter()
                        .zip(x)
                        .map(|(g, &v)| {
                            let u = SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v);
                            let t = u.tanh();
                            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect();
                    out.push((0, a, da));
                }
            }
            &Op::Softmax { x, axis } => {
                if self.wants(x) {
                    let y = nodes[i].value.data();
                    let (outer, len, inner) = axis_split(nodes[i].value.shape(), axis);
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for q in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + q;
                            let dot: f64 = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                    out.push((0, x, dx));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = nodes[gamma].value.numel();
                let rows = normalized.len() / c;
                if self.wants(x) {
                    let gam = nodes[gamma].value.data();
                    let mut dx = vec![0.0; normalized.len()];
                    for r in 0..rows {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..c {
                            let dh = gd[r * c + j] * gam[j];
                            m1 += dh;
                            m2 += dh * normalized[r * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = gd[r * c + j] * gam[j];
                            dx[r * c + j] = rstd[r] * (dh - m1 - normalized[r * c + j] * m2);
                        }
                    }
                    out.push((0, x, dx));
                }
                if self.wants(gamma) {
                    let mut dg = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += gd[r * c + j] * normalized[r * c + j];
                        }
                    }
                    out.push((1, gamma, dg));
                }
                if self.wants(beta) {
                    let mut db = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] += gd[r * c + j];
                        }
                    }
                    out.push((2, beta, db));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let logits = *logits;
                if self.wants(logits) {
                    let p = targets.len();
                    let k = probs.len() / p;
                    let scale = gd[0] / p as f64;
                    let mut dz: Vec<f64> = probs.iter().map(|q| q * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dz[r * k + t] -= scale;
                    }
                    out.push((0, logits, dz));
                }
            }
            &Op::SliceLast { x, start } => {
                if self.wants(x) {
                    let c = *nodes[x].value.shape().last().expect("sliced tensor");
                    let len = *g.shape().last().expect("slice output");
                    let rows = g.numel() / len;
                    let mut dx = vec![0.0; nodes[x].value.numel()];
                    for r in 0..rows {
                        dx[r * c + start..r * c + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                    }
                    out.push((0, x, dx));
                }
            }
            Op::ConcatLast(parts) => {
                let total = *g.shape().last().expect("concat output");
                let rows = g.numel() / total;
                let mut offset = 0;
                for (slot, &p) in parts.iter().enumerate() {
                    let w = *nodes[p].value.shape().last().expect("concat part");
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        out.push((slot, p, dp));
                    }
                    offset += w;
                }
            }
        }
        for (slot, input, contrib) in out {
            self.accumulate(kind, slot, input, contrib);
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Central-difference gradient of `f` at `x`, entry by entry.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, eps: f64) -> Result<Tensor> {
    let all: Vec<usize> = (0..x.numel()).collect();
    let g = finite_diff_entries(&mut f, x, eps, &all)?;
    Tensor::new(x.shape(), g)
}

/// Central differences at the listed flat indices only.
pub fn finite_diff_entries(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
    indices: &[usize],
) -> Result<Vec<f64>> {
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidTensor(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        for v in [plus, minus] {
            if !v.is_finite() {
                return Err(Error::NonFinite { index: i, value: v });
            }
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Central differences of `Σ_j f(x)_j` at the listed flat indices, with the
/// subtraction done term by term before summing. Equal to
/// [`finite_diff_entries`] on the summed function in exact arithmetic, but
/// the difference never passes through the rounded total.
pub fn finite_diff_terms(
    mut f: impl FnMut(&Tensor) -> Result<Vec<f64>>,
    x: &Tensor,
    eps: f64,
    indices: &[usize],
) -> Result<Vec<f64>> {
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidTensor(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if let Some(&v) = plus.iter().chain(&minus).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i, value: v });
        }
        let diff: f64 = plus.iter().zip(&minus).map(|(p, m)| p - m).sum();
        out.push(diff / (2.0 * eps));
    }
    Ok(out)
}

/// `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
