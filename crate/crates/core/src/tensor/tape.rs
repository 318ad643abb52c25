use super::kernels::{gemm, Mat};
use super::{numel, Result, Tensor, TensorError};
use crate::par::{for_each_chunk_mut, Execution};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `[.., k] x [k, n]`, leading dimensions flattened into rows.
    MatMul(Var, Var),
    Transpose(Var),
    /// `[B, m, k] x [B, k, n]`; `a` may be a shared `[m, k]`.
    Bmm(Var, Var),
    /// `[B, m, k] x [B, n, k]^T`.
    BmmNt(Var, Var),
    Softmax(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Concat(Vec<Var>),
    SliceLast { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    MaskedMse {
        pred: Var,
        target: Vec<f64>,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    Rope { x: Var, positions: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// An append-only record of primitive operations.
///
/// Nodes are stored in creation order, so every operation's inputs precede it
/// and a reverse sweep is a valid topological order for backpropagation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    exec: Execution,
}

const ROPE_BASE: f64 = 10000.0;

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap();
    (numel(shape) / last, last)
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_execution(exec: Execution) -> Self {
        Tape {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<f64>, kind: Op) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NumericOverflow { op });
        }
        let needs_grad = match &kind {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Bmm(a, b)
            | Op::BmmNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Concat(xs) => xs.iter().any(|x| self.nodes[x.0].needs_grad),
            Op::Transpose(x)
            | Op::Softmax(x)
            | Op::Relu(x)
            | Op::Scale(x, _)
            | Op::SliceLast { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Rope { x, .. } => self.nodes[x.0].needs_grad,
            Op::MaskedMse { pred, .. } => self.nodes[pred.0].needs_grad,
        };
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a [.., k] x b [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() < 2 || tb.shape().len() != 2 || *ta.shape().last().unwrap() != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (rows, k) = split_last(ta.shape());
        let n = tb.shape()[1];
        let mut out = vec![0.0; rows * n];
        gemm(
            Mat::row_major(ta.data(), rows, k),
            Mat::row_major(tb.data(), k, n),
            &mut out,
            0.0,
        );
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", shape, out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got {:?}", t.shape()),
            });
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(x))
    }

    /// Batched product. `a` is `[B, m, k]` or a shared `[m, k]`; `b` is `[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let sa = ta.shape();
        let sb = tb.shape();
        let ok = sb.len() == 3
            && ((sa.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1]) || (sa.len() == 2 && sa[1] == sb[1]));
        if !ok {
            return Err(mismatch("bmm", ta, tb));
        }
        let shared = sa.len() == 2;
        let (batch, k, n) = (sb[0], sb[1], sb[2]);
        let m = sa[sa.len() - 2];
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for_each_chunk_mut(self.exec, &mut out, m * n, |bi, c| {
            let a_off = if shared { 0 } else { bi * m * k };
            gemm(
                Mat::row_major(&ad[a_off..a_off + m * k], m, k),
                Mat::row_major(&bd[bi * k * n..(bi + 1) * k * n], k, n),
                c,
                0.0,
            );
        });
        self.push("bmm", vec![batch, m, n], out, Op::Bmm(a, b))
    }

    /// `a [B, m, k] x b [B, n, k]^T -> [B, m, n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(mismatch("bmm_nt", ta, tb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for_each_chunk_mut(self.exec, &mut out, m * n, |bi, c| {
            gemm(
                Mat::row_major(&ad[bi * m * k..(bi + 1) * m * k], m, k),
                Mat::transposed(&bd[bi * n * k..(bi + 1) * n * k], n, k),
                c,
                0.0,
            );
        });
        self.push("bmm_nt", vec![batch, m, n], out, Op::BmmNt(a, b))
    }

    /// Softmax over the last dimension, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, c) = split_last(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = t.shape().to_vec();
        self.push("softmax", shape, out, Op::Softmax(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push("relu", shape, out, Op::Relu(x))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, kind: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(op, shape, out, kind)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * s).collect();
        let shape = t.shape().to_vec();
        self.push("scale", shape, out, Op::Scale(x, s))
    }

    /// Adds a `[d]` bias to every row of `x [.., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().unwrap();
        if tb.shape() != [d] {
            return Err(mismatch("add_bias", tx, tb));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let shape = tx.shape().to_vec();
        self.push("add_bias", shape, out, Op::AddBias(x, bias))
    }

    /// Concatenates along the last dimension.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]);
        let lead = &first.shape()[..first.shape().len() - 1];
        let rows = numel(lead);
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            if &t.shape()[..t.shape().len() - 1] != lead {
                return Err(mismatch("concat", first, t));
            }
            widths.push(*t.shape().last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push("concat", shape, out, Op::Concat(xs.to_vec()))
    }

    /// Columns `start..end` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = split_last(t.shape());
        if start >= end || end > c {
            return Err(TensorError::Invalid {
                op: "slice_last",
                msg: format!("range {start}..{end} out of 0..{c}"),
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * c + start..r * c + end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        self.push("slice_last", shape, out, Op::SliceLast { x, start })
    }

    /// Rows `start..end` of the second-to-last dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 || start >= end || end > s[s.len() - 2] {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{end} invalid for {s:?}"),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let outer = numel(s) / (r * c);
        let mut out = Vec::with_capacity(outer * (end - start) * c);
        for o in 0..outer {
            let base = o * r * c;
            out.extend_from_slice(&t.data()[base + start * c..base + end * c]);
        }
        let mut shape = s.to_vec();
        let len = shape.len();
        shape[len - 2] = end - start;
        self.push("slice_rows", shape, out, Op::SliceRows { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if numel(shape) != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = t.data().to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    /// Mean squared error over the entries selected by `mask` (all when `None`).
    pub fn masked_mse(&mut self, pred: Var, target: &[f64], mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(pred);
        if target.len() != t.numel() || mask.is_some_and(|m| m.len() != t.numel()) {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mse",
                left: t.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let mut s = 0.0;
        let mut count = 0usize;
        for (i, (&p, &y)) in t.data().iter().zip(target).enumerate() {
            if mask.is_none_or(|m| m[i]) {
                s += (p - y) * (p - y);
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "masked_mse",
                msg: "mask selects no entries".into(),
            });
        }
        self.push(
            "masked_mse",
            vec![1],
            vec![s / count as f64],
            Op::MaskedMse {
                pred,
                target: target.to_vec(),
                mask: mask.map(|m| m.to_vec()),
                count,
            },
        )
    }

    /// Rotary position embedding over `x [.., m, d]`; row `r` is rotated by
    /// angles `positions[r] * base^(-2i/d)` on each channel pair `(2i, 2i+1)`.
    pub fn rope(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 || s[s.len() - 2] != positions.len() || !s[s.len() - 1].is_multiple_of(2) {
            return Err(TensorError::Invalid {
                op: "rope",
                msg: format!("shape {s:?} with {} positions", positions.len()),
            });
        }
        let out = rope_apply(t.data(), s, positions, 1.0);
        let shape = s.to_vec();
        self.push(
            "rope",
            shape,
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
            },
        )
    }

    /// Populates gradients of every leaf created with `requires_grad`.
    ///
    /// Leaves with no path to `loss` get an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let n = node.value.numel();
                node.value.set_grad(g.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (rows, k) = split_last(ta.shape());
                let n = tb.shape()[1];
                if self.wants(*a) {
                    let ga = slot(grads, *a, ta.numel());
                    gemm(Mat::row_major(g, rows, n), Mat::transposed(tb.data(), k, n), ga, 1.0);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, tb.numel());
                    gemm(Mat::transposed(ta.data(), rows, k), Mat::row_major(g, rows, n), gb, 1.0);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[1], out.shape()[0]);
                let gx = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let sb = tb.shape();
                let (batch, k, n) = (sb[0], sb[1], sb[2]);
                let shared = ta.shape().len() == 2;
                let m = ta.shape()[ta.shape().len() - 2];
                let ad = ta.data();
                let bd = tb.data();
                if self.wants(*a) {
                    let ga = slot(grads, *a, ta.numel());
                    if shared {
                        // Ordered accumulation keeps the result independent of threading.
                        for bi in 0..batch {
                            gemm(
                                Mat::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n),
                                Mat::transposed(&bd[bi * k * n..(bi + 1) * k * n], k, n),
                                ga,
                                1.0,
                            );
                        }
                    } else {
                        for_each_chunk_mut(self.exec, ga, m * k, |bi, c| {
                            gemm(
                                Mat::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n),
                                Mat::transposed(&bd[bi * k * n..(bi + 1) * k * n], k, n),
                                c,
                                1.0,
                            );
                        });
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, tb.numel());
                    for_each_chunk_mut(self.exec, gb, k * n, |bi, c| {
                        let a_off = if shared { 0 } else { bi * m * k };
                        gemm(
                            Mat::transposed(&ad[a_off..a_off + m * k], m, k),
                            Mat::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n),
                            c,
                            1.0,
                        );
                    });
                }
            }
            Op::BmmNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (_, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[1];
                let (ad, bd) = (ta.data(), tb.data());
                if self.wants(*a) {
                    let ga = slot(grads, *a, ta.numel());
                    for_each_chunk_mut(self.exec, ga, m * k, |bi, c| {
                        gemm(
                            Mat::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n),
                            Mat::row_major(&bd[bi * n * k..(bi + 1) * n * k], n, k),
                            c,
                            1.0,
                        );
                    });
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, tb.numel());
                    for_each_chunk_mut(self.exec, gb, n * k, |bi, c| {
                        gemm(
                            Mat::transposed(&g[bi * m * n..(bi + 1) * m * n], m, n),
                            Mat::row_major(&ad[bi * m * k..(bi + 1) * m * k], m, k),
                            c,
                            1.0,
                        );
                    });
                }
            }
            Op::Softmax(x) => {
                let (_, c) = split_last(out.shape());
                let y = out.data();
                let gx = slot(grads, *x, y.len());
                for ((yr, gr), gxr) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((gxv, yv), gv) in gxr.iter_mut().zip(yr).zip(gr) {
                        *gxv += yv * (gv - dot);
                    }
                }
            }
            Op::Relu(x) => {
                let xin = self.value(*x).data();
                let gx = slot(grads, *x, xin.len());
                for ((gxv, &xv), &gv) in gx.iter_mut().zip(xin).zip(g) {
                    if xv > 0.0 {
                        *gxv += gv;
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b);
            }
            Op::AddBias(x, bias) => {
                let d = self.value(*bias).numel();
                if self.wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if self.wants(*bias) {
                    let gb = slot(grads, *bias, d);
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Concat(xs) => {
                let total = *out.shape().last().unwrap();
                let rows = out.numel() / total;
                let mut off = 0;
                for &x in xs {
                    let w = *self.value(x).shape().last().unwrap();
                    if self.wants(x) {
                        let gx = slot(grads, x, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            gx[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceLast { x, start } => {
                let tx = self.value(*x);
                let (rows, c) = split_last(tx.shape());
                let w = *out.shape().last().unwrap();
                let gx = slot(grads, *x, tx.numel());
                for r in 0..rows {
                    let dst = &mut gx[r * c + start..r * c + start + w];
                    dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(a, b)| *a += b);
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let s = tx.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let kept = out.shape()[out.shape().len() - 2];
                let outer = tx.numel() / (r * c);
                let gx = slot(grads, *x, tx.numel());
                for o in 0..outer {
                    let dst = &mut gx[o * r * c + start * c..o * r * c + (start + kept) * c];
                    let src = &g[o * kept * c..(o + 1) * kept * c];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            Op::Reshape(x) => {
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let gx = slot(grads, *x, n);
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            } => {
                let p = self.value(*pred).data();
                let gp = slot(grads, *pred, p.len());
                let scale = 2.0 * g[0] / *count as f64;
                for j in 0..p.len() {
                    if mask.as_ref().is_none_or(|m| m[j]) {
                        gp[j] += scale * (p[j] - target[j]);
                    }
                }
            }
            Op::Rope { x, positions } => {
                let back = rope_apply(g, out.shape(), positions, -1.0);
                let gx = slot(grads, *x, g.len());
                gx.iter_mut().zip(back).for_each(|(a, b)| *a += b);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn rope_apply(data: &[f64], shape: &[usize], positions: &[usize], direction: f64) -> Vec<f64> {
    let d = shape[shape.len() - 1];
    let m = shape[shape.len() - 2];
    let mut out = data.to_vec();
    for (ri, row) in out.chunks_mut(d).enumerate() {
        let pos = positions[ri % m] as f64;
        for i in 0..d / 2 {
            let theta = direction * pos * ROPE_BASE.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = theta.sin_cos();
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * c - x1 * s;
            row[2 * i + 1] = x0 * s + x1 * c;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_and_matmul_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let x = tape.reshape(x, &[1, 3]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let a = tape.constant(t(&[2, 3], &[1.0; 6]));
        let b = tape.constant(t(&[3, 2], &[1.0; 6]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 2]);
        assert_eq!(tape.value(c).data(), &[3.0; 4]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1.0; 6]));
        let b = tape.constant(t(&[2, 3], &[1.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1], &[1e200]));
        let b = tape.constant(t(&[1, 1], &[1e200]));
        assert_eq!(
            tape.matmul(a, b).unwrap_err(),
            TensorError::NumericOverflow { op: "matmul" }
        );
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, -2.0, 7.0]).with_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[2.0]).with_grad(true));
        let l = tape.masked_mse(x, &[0.0], None).unwrap();
        assert_eq!(tape.value(l).data(), &[4.0]);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad(true));
        let unused = tape.leaf(t(&[2], &[5.0, 6.0]).with_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad(true));
        let y = tape.scale(x, 2.0).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), TensorError::NotScalar(vec![2]));
    }

    #[test]
    fn rope_at_position_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]));
        let y = tape.rope(x, &[0, 1]).unwrap();
        let out = tape.value(y).data();
        assert_eq!(&out[..4], &[1.0, 2.0, 3.0, 4.0]);
        assert_ne!(&out[4..], &[1.0, 2.0, 3.0, 4.0]);
        // rotations preserve the norm of each channel pair
        let n0 = out[4] * out[4] + out[5] * out[5];
        assert!((n0 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn shared_bmm_matches_per_batch() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2, 1], &[1.0, 1.0, 2.0, -1.0]));
        let c = tape.bmm(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0, 0.0, 2.0]);
    }
}
