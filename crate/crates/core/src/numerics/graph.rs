//! Reverse-mode gradient computation over a recorded computation graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and the
//! backward sweep is a single reverse walk. Parameters are borrowed rather
//! than copied; their gradients are read back with [`Graph::grad`].

use std::borrow::Cow;
use std::ops::Range;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution expressed as an im2col gather.
///
/// Input rows are laid out as `[n, height, width, channels]`, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

/// Layout of a multi-head attention call.
///
/// `key_ranges[t]` is the contiguous set of key rows query `t` may attend to.
/// The relative offset of key `j` seen from query `t` is
/// `query_offset + t - j`, which indexes column of the bias table.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub n_heads: usize,
    pub query_offset: usize,
    pub key_ranges: Vec<Range<usize>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Im2Col { x: Var, geom: ConvGeometry },
    Attention { q: Var, k: Var, v: Var, rel: Var, layout: AttentionLayout, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Pick { x: Var, idx: Vec<usize> },
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded computation graph. One graph serves one forward/backward pair.
#[derive(Debug, Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    backward_done: bool,
}

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

fn shape_pair(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::shape(format!("{op}: incompatible shapes {:?} and {:?}", a.shape(), b.shape()))
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf that takes no part in differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, requires_grad: false, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf; gradients are tracked when the tensor asks for them.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf, used for parameters. `track` overrides the tensor's own flag.
    pub fn borrowed(&mut self, t: &'p Tensor, track: bool) -> Var {
        let requires_grad = track && t.requires_grad();
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_pair("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "minimum", f64::min)?;
        Ok(self.push(value, Op::Minimum(a, b), &[a, b]))
    }

    fn zip(&self, a: Var, b: Var, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_pair(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Adds a `[n]` row to every row of an `[m, n]` tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let n = tx.cols();
        if tr.numel() != n {
            return Err(shape_pair("add_row", tx, tr));
        }
        let mut data = tx.data().to_vec();
        if n > 0 {
            for chunk in data.chunks_mut(n) {
                for (d, b) in chunk.iter_mut().zip(tr.data()) {
                    *d += b;
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.map(x, |v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("map preserves shape")
    }

    // ---------------------------------------------------------------------
    // Pointwise nonlinearities
    // ---------------------------------------------------------------------

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| 0.5 * v * (1.0 + (GELU_A * (v + GELU_B * v * v * v)).tanh()));
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::exp);
        self.push(value, Op::Exp(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.map(x, |v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { x, lo, hi }, &[x])
    }

    // ---------------------------------------------------------------------
    // Row-wise normalisations
    // ---------------------------------------------------------------------

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if n == 0 {
            return Err(Error::shape(format!("softmax over empty axis, shape {:?}", t.shape())));
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if n == 0 {
            return Err(Error::shape(format!("log_softmax over empty axis, shape {:?}", t.shape())));
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax(x), &[x]))
    }

    /// Layer normalisation over the last axis followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d < 2 {
            return Err(Error::shape(format!("layer_norm needs at least 2 features, shape {:?}", tx.shape())));
        }
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::shape(format!(
                "layer_norm: input {:?} with gain {:?} and bias {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    // ---------------------------------------------------------------------
    // Structural ops
    // ---------------------------------------------------------------------

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_pair("concat_cols", self.value(parts[0]), t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_pair("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(Error::shape(format!("rows {start}..{} out of range for {:?}", start + len, t.shape())));
        }
        let c = t.cols();
        let value = Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if start + len > c {
            return Err(Error::shape(format!("cols {start}..{} out of range for {:?}", start + len, t.shape())));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).detached().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Gathers convolution patches: `[n*h*w, c]` rows become
    /// `[n*out_h*out_w, kernel*kernel*c]`, zero padded at the border.
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        let t = self.value(x);
        let expected = geom.n * geom.height * geom.width * geom.channels;
        if t.numel() != expected {
            return Err(Error::shape(format!("im2col: {:?} does not match {geom:?}", t.shape())));
        }
        let (oh, ow, patch) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let mut out = vec![0.0; geom.n * oh * ow * patch];
        for_each_patch_entry(&geom, |dst, src| out[dst] = t.data()[src]);
        let value = Tensor::new(vec![geom.n * oh * ow, patch], out)?;
        Ok(self.push(value, Op::Im2Col { x, geom }, &[x]))
    }

    /// Multi-head scaled dot-product attention with an additive per-head
    /// relative-offset bias.
    ///
    /// `q` is `[tq, d]`, `k` and `v` are `[tk, d]`, `rel` is `[heads, r]`.
    /// Keys outside a query's range contribute exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, rel: Var, layout: AttentionLayout) -> Result<Var> {
        let (tq, tk, tv, tr) = (self.value(q), self.value(k), self.value(v), self.value(rel));
        let d = tq.cols();
        let h = layout.n_heads;
        if h == 0 || d % h != 0 {
            return Err(Error::shape(format!("attention: width {d} not divisible into {h} heads")));
        }
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(Error::shape(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if layout.key_ranges.len() != tq.rows() {
            return Err(Error::shape(format!(
                "attention: {} key ranges for {} queries",
                layout.key_ranges.len(),
                tq.rows()
            )));
        }
        if tr.shape().len() != 2 || tr.shape()[0] != h {
            return Err(Error::shape(format!("attention: bias table {:?} for {h} heads", tr.shape())));
        }
        let n_off = tr.shape()[1];
        let n_keys = tk.rows();
        for (t, range) in layout.key_ranges.iter().enumerate() {
            if range.is_empty() {
                return Err(Error::contract(format!("attention row {t} has no allowed keys")));
            }
            if range.end > n_keys || range.end > layout.query_offset + t + 1 {
                return Err(Error::contract(format!("attention row {t} range {range:?} is not causal")));
            }
            if layout.query_offset + t - range.start >= n_off {
                return Err(Error::shape(format!(
                    "attention row {t}: offset {} exceeds bias table width {n_off}",
                    layout.query_offset + t - range.start
                )));
            }
        }

        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let row_start: Vec<usize> = layout
            .key_ranges
            .iter()
            .scan(0, |acc, r| {
                let s = *acc;
                *acc += r.len();
                Some(s)
            })
            .collect();
        let per_head: usize = layout.key_ranges.iter().map(Range::len).sum();
        let mut probs = vec![0.0; h * per_head];
        let mut out = vec![0.0; tq.rows() * d];
        let (qd, kd, vd, rd) = (tq.data(), tk.data(), tv.data(), tr.data());

        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            for (t, range) in layout.key_ranges.iter().enumerate() {
                let qrow = &qd[t * d + cols.start..t * d + cols.end];
                let p = &mut probs[head * per_head + row_start[t]..][..range.len()];
                let qpos = layout.query_offset + t;
                let mut max = f64::NEG_INFINITY;
                for (slot, j) in range.clone().enumerate() {
                    let krow = &kd[j * d + cols.start..j * d + cols.end];
                    let logit = dot(qrow, krow) * scale + rd[head * n_off + (qpos - j)];
                    p[slot] = logit;
                    max = max.max(logit);
                }
                softmax_shifted(p, max);
                let orow = &mut out[t * d + cols.start..t * d + cols.end];
                for (slot, j) in range.clone().enumerate() {
                    axpy(p[slot], &vd[j * d + cols.start..j * d + cols.end], orow);
                }
            }
        }
        let value = Tensor::new(vec![tq.rows(), d], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, rel, layout, probs }, &[q, k, v, rel]))
    }

    // ---------------------------------------------------------------------
    // Reductions and selection
    // ---------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::shape("mean of empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), &[x]))
    }

    /// Selects `x[i, idx[i]]` for every row, giving an `[m, 1]` column.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if idx.len() != t.rows() {
            return Err(Error::shape(format!("pick: {} indices for shape {:?}", idx.len(), t.shape())));
        }
        let mut data = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            data.push(t.data()[r * n + i]);
        }
        let value = Tensor::new(vec![idx.len(), 1], data)?;
        Ok(self.push(value, Op::Pick { x, idx: idx.to_vec() }, &[x]))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Populates gradients of `loss` on every reachable tracked node.
    ///
    /// A second call without [`Graph::zero_grad`] is a state error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph; call zero_grad first".into()));
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", lt.shape())));
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", lt.data()[0])));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contribs = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contribs {
                self.accumulate(v, c);
            }
        }
        Ok(())
    }

    /// Clears every gradient so that [`Graph::backward`] may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.tracked(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            da[r * k + c] = dot(grow, &tb.data()[c * n..(c + 1) * n]);
                        }
                    }
                    res.push((*a, da));
                }
                if self.tracked(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let av = ta.data()[r * k + c];
                            if av != 0.0 {
                                axpy(av, grow, &mut db[c * n..(c + 1) * n]);
                            }
                        }
                    }
                    res.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    res.push((*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect()));
                }
                if self.tracked(*b) {
                    res.push((*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = ta.data().iter().zip(tb.data()).map(|(x, y)| x <= y).collect();
                res.push((*a, g.iter().zip(&pick_a).map(|(v, &p)| if p { *v } else { 0.0 }).collect()));
                res.push((*b, g.iter().zip(&pick_a).map(|(v, &p)| if p { 0.0 } else { *v }).collect()));
            }
            Op::AddRow(x, row) => {
                res.push((*x, g.to_vec()));
                if self.tracked(*row) {
                    let n = self.value(*row).numel();
                    let mut dr = vec![0.0; n];
                    if n > 0 {
                        for chunk in g.chunks(n) {
                            for (d, v) in dr.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                    }
                    res.push((*row, dr));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Tanh(x) => res.push((*x, g.iter().zip(out).map(|(v, y)| v * (1.0 - y * y)).collect())),
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xs)
                    .map(|(v, &x)| {
                        let t = (GELU_A * (x + GELU_B * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_A * (1.0 + 3.0 * GELU_B * x * x);
                        v * d
                    })
                    .collect();
                res.push((*x, dx));
            }
            Op::Exp(x) => res.push((*x, g.iter().zip(out).map(|(v, y)| v * y).collect())),
            Op::Clamp { x, lo, hi } => {
                let xs = self.value(*x).data();
                let dx = g.iter().zip(xs).map(|(v, &x)| if x >= *lo && x <= *hi { *v } else { 0.0 }).collect();
                res.push((*x, dx));
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let s = dot(gr, yr);
                    for c in 0..n {
                        dxr[c] = yr[c] * (gr[c] - s);
                    }
                }
                res.push((*x, dx));
            }
            Op::LogSoftmax(x) => {
                let n = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let s: f64 = gr.iter().sum();
                    for c in 0..n {
                        dxr[c] = gr[c] - yr[c].exp() * s;
                    }
                }
                res.push((*x, dx));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let tg = self.value(*gain);
                let d = tg.numel();
                let rows = inv_std.len();
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for c in 0..d {
                        dxhat[c] = gr[c] * tg.data()[c];
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dot(&dxhat, hr) / d as f64;
                    for c in 0..d {
                        dx[r * d + c] = inv_std[r] * (dxhat[c] - m1 - hr[c] * m2);
                    }
                }
                res.push((*x, dx));
                res.push((*gain, dgain));
                res.push((*bias, dbias));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.tracked(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        res.push((p, dp));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.tracked(p) {
                        res.push((p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut dx = vec![0.0; tx.numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                res.push((*x, dx));
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let w = node.value.cols();
                let mut dx = vec![0.0; tx.numel()];
                for r in 0..tx.rows() {
                    dx[r * c + start..r * c + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                res.push((*x, dx));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Im2Col { x, geom } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for_each_patch_entry(geom, |dst, src| dx[src] += g[dst]);
                res.push((*x, dx));
            }
            Op::Attention { q, k, v, rel, layout, probs } => {
                res.extend(self.attention_grads(*q, *k, *v, *rel, layout, probs, g));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                res.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::Pick { x, idx } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut dx = vec![0.0; tx.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * n + i] = g[r];
                }
                res.push((*x, dx));
            }
        }
        res
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_grads(
        &self,
        q: Var,
        k: Var,
        v: Var,
        rel: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        g: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (tq, tk, tv, tr) = (self.value(q), self.value(k), self.value(v), self.value(rel));
        let d = tq.cols();
        let h = layout.n_heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_off = tr.shape()[1];
        let per_head: usize = layout.key_ranges.iter().map(Range::len).sum();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut drel = vec![0.0; tr.numel()];
        let mut dp = Vec::new();

        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            let mut start = 0;
            for (t, range) in layout.key_ranges.iter().enumerate() {
                let p = &probs[head * per_head + start..][..range.len()];
                start += range.len();
                let grow = &g[t * d + cols.start..t * d + cols.end];
                let qrow = &qd[t * d + cols.start..t * d + cols.end];
                let qpos = layout.query_offset + t;
                dp.clear();
                dp.extend(range.clone().map(|j| dot(grow, &vd[j * d + cols.start..j * d + cols.end])));
                let pdp = dot(p, &dp);
                for (slot, j) in range.clone().enumerate() {
                    let kv = j * d + cols.start..j * d + cols.end;
                    axpy(p[slot], grow, &mut dv[kv.clone()]);
                    let ds = p[slot] * (dp[slot] - pdp);
                    if ds != 0.0 {
                        axpy(ds * scale, &kd[kv.clone()], &mut dq[t * d + cols.start..t * d + cols.end]);
                        axpy(ds * scale, qrow, &mut dk[kv]);
                        drel[head * n_off + (qpos - j)] += ds;
                    }
                }
            }
        }
        vec![(q, dq), (k, dk), (v, dv), (rel, drel)]
    }
}

/// Visits every (destination, source) pair of an im2col gather.
fn for_each_patch_entry(geom: &ConvGeometry, mut f: impl FnMut(usize, usize)) {
    let (oh, ow, patch) = (geom.out_height(), geom.out_width(), geom.patch_len());
    let c = geom.channels;
    for n in 0..geom.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (n * oh + oy) * ow + ox;
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.width as isize {
                            continue;
                        }
                        let src = ((n * geom.height + iy as usize) * geom.width + ix as usize) * c;
                        let dst = row * patch + (ky * geom.kernel + kx) * c;
                        for ch in 0..c {
                            f(dst + ch, src + ch);
                        }
                    }
                }
            }
        }
    }
}

/// `c += a · b` for row-major `a: [m, k]`, `b: [k, n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let crow = &mut c[r * n..(r + 1) * n];
        for i in 0..k {
            let av = a[r * k + i];
            if av != 0.0 {
                axpy(av, &b[i * n..(i + 1) * n], crow);
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax of a single row, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    softmax_shifted(row, max);
}

fn softmax_shifted(row: &mut [f64], max: f64) {
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::matrix(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(m(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let eye = g.constant(m(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let zero = g.constant(Tensor::zeros(&[2, 2]));
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
        let ia = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(ia), g.value(a));
        let az = g.matmul(a, zero).unwrap();
        assert_eq!(g.value(az).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).with_requires_grad());
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap().with_requires_grad());
        let s = g.softmax(x).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_contract_and_state_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad());
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::State(_))));
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1000.0).with_requires_grad());
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::NonFinite(_))));
    }

    #[test]
    fn untracked_inputs_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(2.0).with_requires_grad());
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(w, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[5.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(m(&[vec![5.0; 4]]));
        let one = g.constant(Tensor::full(&[4], 1.0));
        let zero = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);

        let x = g.constant(m(&[vec![1.0, 3.0]]));
        let one = g.constant(Tensor::full(&[2], 1.0));
        let zero = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        // variance 1, so the eps correction is 1/sqrt(1 + 1e-5)
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] + s).abs() < 1e-15);
        assert!((g.value(y).data()[1] - s).abs() < 1e-15);

        let x = g.constant(m(&[vec![1.0, -2.0, 7.0], vec![0.0, 4.0, 4.0]]));
        let gain = g.constant(Tensor::zeros(&[3]));
        let bias = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn layer_norm_rejects_single_feature() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 1]));
        let p = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.layer_norm(x, p, p, 1e-5), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = g.softmax(x).unwrap();
        let d = g.value(y).data();
        for v in &d[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for (v, r) in d[3..].iter().zip([0.09003057317038046, 0.24472847105479767, 0.6652409557748219]) {
            assert!((v - r).abs() < 1e-15);
        }
        let empty = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.softmax(empty), Err(Error::Shape(_))));
    }

    #[test]
    fn single_key_attention_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(vec![1, 4], vec![0.3, -0.2, 1.0, 2.0]).unwrap());
        let k = g.constant(Tensor::new(vec![1, 4], vec![1.0, 1.0, -1.0, 0.5]).unwrap());
        let v = g.constant(Tensor::new(vec![1, 4], vec![7.0, 8.0, 9.0, 10.0]).unwrap());
        let rel = g.constant(Tensor::full(&[2, 1], 3.0));
        let layout = AttentionLayout { n_heads: 2, query_offset: 0, key_ranges: vec![0..1] };
        let out = g.attention(q, k, v, rel, layout).unwrap();
        assert_eq!(g.value(out).data(), &[7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn uniform_scores_give_uniform_weights() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::full(&[3, 2], 0.5));
        let k = g.constant(Tensor::full(&[3, 2], 0.5));
        let v = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let rel = g.constant(Tensor::zeros(&[1, 3]));
        let layout = AttentionLayout { n_heads: 1, query_offset: 0, key_ranges: vec![0..1, 0..2, 0..3] };
        let out = g.attention(q, k, v, rel, layout).unwrap();
        let want = [1.0, 2.0, 2.0, 3.0, 3.0, 4.0];
        for (o, w) in g.value(out).data().iter().zip(want) {
            assert!((o - w).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_rejects_empty_and_acausal_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 2], 0.1));
        let rel = g.constant(Tensor::zeros(&[1, 4]));
        let empty = AttentionLayout { n_heads: 1, query_offset: 0, key_ranges: vec![0..1, 1..1] };
        assert!(matches!(g.attention(x, x, x, rel, empty), Err(Error::Contract(_))));
        let ahead = AttentionLayout { n_heads: 1, query_offset: 0, key_ranges: vec![0..2, 0..2] };
        assert!(matches!(g.attention(x, x, x, rel, ahead), Err(Error::Contract(_))));
    }

    #[test]
    fn im2col_gathers_padded_patches() {
        // 1x2x2 single-channel image, 2x2 kernel, pad 1, stride 1 -> 3x3 outputs
        let geom = ConvGeometry { n: 1, height: 2, width: 2, channels: 1, kernel: 2, stride: 1, pad: 1 };
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.im2col(x, geom).unwrap();
        let t = g.value(p);
        assert_eq!(t.shape(), &[9, 4]);
        assert_eq!(t.row(0), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(t.row(4), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.row(8), &[4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pick_checks_indices() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.pick(x, &[2, 0]).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0]);
        assert!(matches!(g.pick(x, &[3, 0]), Err(Error::Index { index: 3, len: 3 })));
        assert!(matches!(g.pick(x, &[0]), Err(Error::Shape(_))));
    }
}
