//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value and whatever it needs for the backward sweep.
//! [`Graph::backward`] walks the nodes in reverse and accumulates gradients;
//! nothing is reset implicitly, so calling it twice doubles every gradient.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::kernels::{col2im, conv_out_len, gemm, im2col};
use crate::numeric::params::{ParamId, ParamStore};
use crate::numeric::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Glu(Var),
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, cols: Vec<f64> },
    LayerNorm { x: Var, gain: Var, shift: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, causal: bool, probs: Vec<f64> },
    Softmax(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    GatherCols { x: Var, ids: Vec<Vec<usize>> },
    ReplaceRows { x: Var, fill: Var, mask: Vec<bool> },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    StraightThrough(Var),
    Sum(Var),
    Mean(Var),
    SmoothedCe { logits: Var, targets: Vec<Option<usize>>, eps: f64, probs: Vec<f64>, count: usize },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Floor applied to row norms before normalization.
const NORM_FLOOR: f64 = 1e-8;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    /// Constant input that never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free variable that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Reads a parameter; it participates in gradients iff it requires them.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_shared(p.shared_value(), Op::Param(id), p.requires_grad())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.val(a), self.val(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.val(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.val(x), self.val(row));
        let c = tx.cols();
        if tr.numel() != c {
            return Err(Error::shape("add_row", format!("rows of width {c}, vector of {}", tr.numel())));
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, r) in chunk.iter_mut().zip(tr.data()) {
                *d += r;
            }
        }
        let v = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(v, Op::AddRow(x, row), rg))
    }

    /// `a · b` for `a: m×k`, `b: k×n`; with `trans_b`, `b` is `n×k` and the
    /// product is `a · bᵀ`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(Error::shape("matmul", "operands must be matrices"));
        }
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = if trans_b { (tb.cols(), tb.rows()) } else { (tb.rows(), tb.cols()) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}{}", ta.shape(), tb.shape(), if trans_b { "ᵀ" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), trans_b, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.val(x).transpose();
        let rg = self.rg(x);
        self.push(v, Op::Transpose(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| gelu(a).0);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    /// Gated linear unit over the last axis: first half times sigmoid of second half.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let c = t.cols();
        if c % 2 != 0 {
            return Err(Error::shape("glu", format!("odd feature width {c}")));
        }
        let h = c / 2;
        let mut data = Vec::with_capacity(t.numel() / 2);
        for row in t.data().chunks(c) {
            for j in 0..h {
                data.push(row[j] * sigmoid(row[h + j]));
            }
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Glu(x), rg))
    }

    /// 1-d convolution of `x: in×time` with `w: out×in×kernel`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.val(x), self.val(w));
        if tx.shape().len() != 2 || tw.shape().len() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("input must be channels×time and weight out×in×kernel, got {:?} and {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (cin, time) = (tx.shape()[0], tx.shape()[1]);
        let (cout, win, kernel) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if win != cin {
            return Err(Error::shape("conv1d", format!("input has {cin} channels, weight expects {win}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        let out_len = conv_out_len(time, kernel, stride, padding).ok_or_else(|| {
            Error::shape("conv1d", format!("kernel {kernel} exceeds padded length {} (time {time}, padding {padding})", time + 2 * padding))
        })?;
        if let Some(b) = b {
            if self.val(b).numel() != cout {
                return Err(Error::shape("conv1d", format!("bias has {} entries for {cout} output channels", self.val(b).numel())));
            }
        }
        let cols = im2col(tx.data(), cin, time, kernel, stride, padding, out_len);
        let mut out = vec![0.0; cout * out_len];
        if let Some(b) = b {
            for (o, chunk) in out.chunks_mut(out_len).enumerate() {
                chunk.fill(self.val(b).data()[o]);
            }
        }
        gemm(cout, cin * kernel, out_len, tw.data(), false, &cols, false, &mut out, 1.0);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let keep = if self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::from_parts(vec![cout, out_len], out),
            Op::Conv1d { x, w, b, stride, padding, cols: keep },
            rg,
        ))
    }

    /// Normalizes each row over the last axis, then applies gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let t = self.val(x);
        let d = t.cols();
        if self.val(gain).numel() != d || self.val(shift).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("feature width {d}, gain {} and shift {}", self.val(gain).numel(), self.val(shift).numel()),
            ));
        }
        let (g, s) = (self.val(gain).data(), self.val(shift).data());
        let rows = t.rows();
        let mut normed = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let n = (row[j] - mean) * is;
                normed[r * d + j] = n;
                out[r * d + j] = n * g[j] + s[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(
            Tensor::from_parts(t.shape().to_vec(), out),
            Op::LayerNorm { x, gain, shift, normed, inv_std },
            rg,
        ))
    }

    /// Scaled dot-product attention split over `heads`, heads concatenated.
    /// `q: tq×d`, `k, v: tk×d`. With `causal`, query `i` sees keys `j ≤ i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (tq, tk, tv) = (self.val(q), self.val(k), self.val(v));
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        let (nq, nk) = (tq.rows(), tk.rows());
        if causal && nq != nk {
            return Err(Error::shape("attention", format!("causal mask needs square scores, got {nq}×{nk}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            for i in 0..nq {
                let qi = &tq.row(i)[h * dh..(h + 1) * dh];
                let limit = if causal { i + 1 } else { nk };
                let prow = &mut p[i * nk..(i + 1) * nk];
                let mut max = f64::NEG_INFINITY;
                for j in 0..limit {
                    let kj = &tk.row(j)[h * dh..(h + 1) * dh];
                    let s = dot(qi, kj) * scale;
                    prow[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for pj in prow[..limit].iter_mut() {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for pj in prow[..limit].iter_mut() {
                    *pj /= z;
                }
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..limit {
                    let w = prow[j];
                    let vj = &tv.row(j)[h * dh..(h + 1) * dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::from_parts(vec![nq, d], out),
            Op::Attention { q, k, v, heads, causal, probs },
            rg,
        ))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(v, Op::Softmax(x), rg)
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.val(table);
        let (r, c) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no rows requested"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), c], data),
            Op::GatherRows { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Picks, for each row `i`, the columns `ids[i]`; all rows pick the same count.
    pub fn gather_cols(&mut self, x: Var, ids: &[Vec<usize>]) -> Result<Var> {
        let t = self.val(x);
        let (r, c) = (t.rows(), t.cols());
        let width = ids.first().map_or(0, Vec::len);
        if ids.len() != r || width == 0 || ids.iter().any(|row| row.len() != width || row.iter().any(|&j| j >= c)) {
            return Err(Error::shape("gather_cols", format!("invalid column selection for {r}×{c}")));
        }
        let mut data = Vec::with_capacity(r * width);
        for (i, row) in ids.iter().enumerate() {
            data.extend(row.iter().map(|&j| t.row(i)[j]));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![r, width], data), Op::GatherCols { x, ids: ids.to_vec() }, rg))
    }

    /// Replaces every row of `x` whose mask entry is set by the vector `fill`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, mask: &[bool]) -> Result<Var> {
        let (t, f) = (self.val(x), self.val(fill));
        if mask.len() != t.rows() || f.numel() != t.cols() {
            return Err(Error::shape(
                "replace_rows",
                format!("{} rows of width {}, mask of {}, fill of {}", t.rows(), t.cols(), mask.len(), f.numel()),
            ));
        }
        let c = t.cols();
        let mut data = t.data().to_vec();
        for (row, &m) in data.chunks_mut(c).zip(mask) {
            if m {
                row.copy_from_slice(f.data());
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(fill);
        Ok(self.push(v, Op::ReplaceRows { x, fill, mask: mask.to_vec() }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.val(x);
        if start >= end || end > t.rows() {
            return Err(Error::shape("slice_rows", format!("rows {start}..{end} of {}", t.rows())));
        }
        let c = t.cols();
        let v = Tensor::from_parts(vec![end - start, c], t.data()[start * c..end * c].to_vec());
        let rg = self.rg(x);
        Ok(self.push(v, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|p| self.val(*p).cols()).ok_or_else(|| Error::shape("concat_rows", "nothing to concatenate"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.val(*p);
            if t.cols() != c {
                return Err(Error::shape("concat_rows", format!("widths {c} and {}", t.cols())));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|p| self.val(*p).rows()).ok_or_else(|| Error::shape("concat_cols", "nothing to concatenate"))?;
        if parts.iter().any(|p| self.val(*p).rows() != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let width: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.val(*p).row(i));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::from_parts(vec![r, width], data), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(c) {
            let n = dot(row, row).sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(v, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Forward: one-hot of each row's argmax. Backward: identity.
    pub fn straight_through_one_hot(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let c = t.cols();
        let mut data = vec![0.0; t.numel()];
        for (r, row) in t.data().chunks(c).enumerate() {
            data[r * c + argmax(row)] = 1.0;
        }
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(v, Op::StraightThrough(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let s = t.sum() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Label-smoothed cross-entropy averaged over rows whose target is `Some`.
    ///
    /// Per row: `(1−ε)·(−log p_target) + ε·mean_c(−log p_c)`.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], eps: f64) -> Result<Var> {
        let t = self.val(logits);
        let (r, c) = (t.rows(), t.cols());
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", format!("{r} rows of logits, {} targets", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&y| y >= c) {
            return Err(Error::shape("cross_entropy", format!("target {bad} outside {c} classes")));
        }
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        let mut count = 0;
        for (i, target) in targets.iter().enumerate() {
            let row = t.row(i);
            let lse = log_sum_exp(row);
            let p = &mut probs[i * c..(i + 1) * c];
            for (pj, z) in p.iter_mut().zip(row) {
                *pj = (z - lse).exp();
            }
            if let Some(y) = *target {
                let nll = lse - row[y];
                let mean_nll = lse - row.iter().sum::<f64>() / c as f64;
                total += (1.0 - eps) * nll + eps * mean_nll;
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothedCe { logits, targets: targets.to_vec(), eps, probs, count },
            rg,
        ))
    }

    /// Accumulates `d loss / d node` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.val(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.val(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Adds every parameter node's accumulated gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                let p = store.get_mut(*id);
                if p.requires_grad() {
                    p.grad_mut().add_assign(g);
                }
            }
        }
    }

    /// Clears all recorded gradients.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, || zip(g, self.val(*b), |x, y| x * y));
                self.acc(grads, *b, || zip(g, self.val(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => self.acc(grads, *a, || map(g, |x| x * s)),
            Op::AddRow(x, row) => {
                self.acc(grads, *x, || g.clone());
                self.acc(grads, *row, || {
                    let c = g.cols();
                    let mut acc = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (a, v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    Tensor::from_parts(self.val(*row).shape().to_vec(), acc)
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), g.cols());
                self.acc(grads, *a, || {
                    // dA = dC · op(B)ᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), !trans_b, &mut da, 0.0);
                    Tensor::from_parts(ta.shape().to_vec(), da)
                });
                self.acc(grads, *b, || {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, g.data(), true, ta.data(), false, &mut db, 0.0);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, 0.0);
                    }
                    Tensor::from_parts(tb.shape().to_vec(), db)
                });
            }
            Op::Transpose(x) => self.acc(grads, *x, || g.transpose()),
            Op::Relu(x) => self.acc(grads, *x, || zip(g, self.val(*x), |d, v| if v > 0.0 { d } else { 0.0 })),
            Op::Gelu(x) => self.acc(grads, *x, || zip(g, self.val(*x), |d, v| d * gelu(v).1)),
            Op::Glu(x) => self.acc(grads, *x, || {
                let t = self.val(*x);
                let c = t.cols();
                let h = c / 2;
                let mut dx = vec![0.0; t.numel()];
                for (r, row) in t.data().chunks(c).enumerate() {
                    let grow = g.row(r);
                    for j in 0..h {
                        let s = sigmoid(row[h + j]);
                        dx[r * c + j] = grow[j] * s;
                        dx[r * c + h + j] = grow[j] * row[j] * s * (1.0 - s);
                    }
                }
                Tensor::from_parts(t.shape().to_vec(), dx)
            }),
            Op::Conv1d { x, w, b, stride, padding, cols } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (cin, time) = (tx.shape()[0], tx.shape()[1]);
                let (cout, kernel) = (tw.shape()[0], tw.shape()[2]);
                let out_len = g.cols();
                if let Some(b) = b {
                    self.acc(grads, *b, || {
                        let sums = g.data().chunks(out_len).map(|r| r.iter().sum()).collect();
                        Tensor::from_parts(self.val(*b).shape().to_vec(), sums)
                    });
                }
                self.acc(grads, *w, || {
                    let mut dw = vec![0.0; cout * cin * kernel];
                    gemm(cout, out_len, cin * kernel, g.data(), false, cols, true, &mut dw, 0.0);
                    Tensor::from_parts(tw.shape().to_vec(), dw)
                });
                self.acc(grads, *x, || {
                    let mut dcols = vec![0.0; cin * kernel * out_len];
                    gemm(cin * kernel, cout, out_len, tw.data(), true, g.data(), false, &mut dcols, 0.0);
                    let mut dx = vec![0.0; cin * time];
                    col2im(&dcols, cin, time, kernel, *stride, *padding, out_len, &mut dx);
                    Tensor::from_parts(tx.shape().to_vec(), dx)
                });
            }
            Op::LayerNorm { x, gain, shift, normed, inv_std } => {
                let d = g.cols();
                let gv = self.val(*gain).data();
                self.acc(grads, *gain, || {
                    let mut dg = vec![0.0; d];
                    for (grow, nrow) in g.data().chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * nrow[j];
                        }
                    }
                    Tensor::from_parts(self.val(*gain).shape().to_vec(), dg)
                });
                self.acc(grads, *shift, || {
                    let mut ds = vec![0.0; d];
                    for grow in g.data().chunks(d) {
                        for j in 0..d {
                            ds[j] += grow[j];
                        }
                    }
                    Tensor::from_parts(self.val(*shift).shape().to_vec(), ds)
                });
                self.acc(grads, *x, || {
                    let mut dx = vec![0.0; g.numel()];
                    for (r, (grow, nrow)) in g.data().chunks(d).zip(normed.chunks(d)).enumerate() {
                        let dn: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dn.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] * (dn[j] - mean_dn - nrow[j] * mean_dn_n);
                        }
                    }
                    Tensor::from_parts(g.shape().to_vec(), dx)
                });
            }
            Op::Attention { q, k, v, heads, causal, probs } => {
                let (tq, tk, tv) = (self.val(*q), self.val(*k), self.val(*v));
                let d = tq.cols();
                let (nq, nk) = (tq.rows(), tk.rows());
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; nk * d];
                let mut dv = vec![0.0; nk * d];
                let mut dp = vec![0.0; nk];
                for h in 0..*heads {
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..nq {
                        let limit = if *causal { i + 1 } else { nk };
                        let prow = &p[i * nk..(i + 1) * nk];
                        let go = &g.row(i)[cols.clone()];
                        // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                        let mut weighted = 0.0;
                        for j in 0..limit {
                            let vj = &tv.row(j)[cols.clone()];
                            dp[j] = dot(go, vj);
                            weighted += dp[j] * prow[j];
                            let dvj = &mut dv[j * d + h * dh..j * d + (h + 1) * dh];
                            for (a, b) in dvj.iter_mut().zip(go) {
                                *a += prow[j] * b;
                            }
                        }
                        let qi = &tq.row(i)[cols.clone()];
                        for j in 0..limit {
                            let ds = prow[j] * (dp[j] - weighted) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &tk.row(j)[cols.clone()];
                            let dqi = &mut dq[i * d + h * dh..i * d + (h + 1) * dh];
                            for (a, b) in dqi.iter_mut().zip(kj) {
                                *a += ds * b;
                            }
                            let dkj = &mut dk[j * d + h * dh..j * d + (h + 1) * dh];
                            for (a, b) in dkj.iter_mut().zip(qi) {
                                *a += ds * b;
                            }
                        }
                    }
                }
                self.acc(grads, *q, || Tensor::from_parts(vec![nq, d], dq));
                self.acc(grads, *k, || Tensor::from_parts(vec![nk, d], dk));
                self.acc(grads, *v, || Tensor::from_parts(vec![nk, d], dv));
            }
            Op::Softmax(x) => self.acc(grads, *x, || {
                let c = g.cols();
                let mut dx = vec![0.0; g.numel()];
                for (r, (grow, yrow)) in g.data().chunks(c).zip(out.data().chunks(c)).enumerate() {
                    let inner = dot(grow, yrow);
                    for j in 0..c {
                        dx[r * c + j] = yrow[j] * (grow[j] - inner);
                    }
                }
                Tensor::from_parts(g.shape().to_vec(), dx)
            }),
            Op::GatherRows { table, ids } => self.acc(grads, *table, || {
                let t = self.val(*table);
                let c = t.cols();
                let mut dt = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (a, b) in dt[id * c..(id + 1) * c].iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                Tensor::from_parts(t.shape().to_vec(), dt)
            }),
            Op::GatherCols { x, ids } => self.acc(grads, *x, || {
                let t = self.val(*x);
                let c = t.cols();
                let mut dx = vec![0.0; t.numel()];
                for (r, row) in ids.iter().enumerate() {
                    for (k, &j) in row.iter().enumerate() {
                        dx[r * c + j] += g.row(r)[k];
                    }
                }
                Tensor::from_parts(t.shape().to_vec(), dx)
            }),
            Op::ReplaceRows { x, fill, mask } => {
                let c = g.cols();
                self.acc(grads, *x, || {
                    let mut dx = g.data().to_vec();
                    for (row, &m) in dx.chunks_mut(c).zip(mask) {
                        if m {
                            row.fill(0.0);
                        }
                    }
                    Tensor::from_parts(g.shape().to_vec(), dx)
                });
                self.acc(grads, *fill, || {
                    let mut df = vec![0.0; c];
                    for (row, &m) in g.data().chunks(c).zip(mask) {
                        if m {
                            for (a, b) in df.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                    }
                    Tensor::from_parts(self.val(*fill).shape().to_vec(), df)
                });
            }
            Op::SliceRows { x, start } => self.acc(grads, *x, || {
                let t = self.val(*x);
                let c = t.cols();
                let mut dx = vec![0.0; t.numel()];
                dx[start * c..start * c + g.numel()].copy_from_slice(g.data());
                Tensor::from_parts(t.shape().to_vec(), dx)
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.val(*p).numel();
                    let shape = self.val(*p).shape().to_vec();
                    self.acc(grads, *p, || Tensor::from_parts(shape, g.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let width = g.cols();
                let mut offset = 0;
                for p in parts {
                    let t = self.val(*p);
                    let c = t.cols();
                    self.acc(grads, *p, || {
                        let mut d = Vec::with_capacity(t.numel());
                        for row in g.data().chunks(width) {
                            d.extend_from_slice(&row[offset..offset + c]);
                        }
                        Tensor::from_parts(t.shape().to_vec(), d)
                    });
                    offset += c;
                }
            }
            Op::L2NormalizeRows { x, norms } => self.acc(grads, *x, || {
                let c = g.cols();
                let mut dx = vec![0.0; g.numel()];
                for (r, (grow, yrow)) in g.data().chunks(c).zip(out.data().chunks(c)).enumerate() {
                    let inner = dot(grow, yrow);
                    for j in 0..c {
                        dx[r * c + j] = (grow[j] - yrow[j] * inner) / norms[r];
                    }
                }
                Tensor::from_parts(g.shape().to_vec(), dx)
            }),
            Op::StraightThrough(x) => self.acc(grads, *x, || g.clone()),
            Op::Sum(x) => self.acc(grads, *x, || Tensor::full(self.val(*x).shape(), g.item())),
            Op::Mean(x) => self.acc(grads, *x, || {
                let t = self.val(*x);
                Tensor::full(t.shape(), g.item() / t.numel() as f64)
            }),
            Op::SmoothedCe { logits, targets, eps, probs, count } => self.acc(grads, *logits, || {
                let t = self.val(*logits);
                let c = t.cols();
                let mut dl = vec![0.0; t.numel()];
                if *count > 0 {
                    let w = g.item() / *count as f64;
                    for (i, target) in targets.iter().enumerate() {
                        let Some(y) = *target else { continue };
                        for j in 0..c {
                            let onehot = if j == y { 1.0 - eps } else { 0.0 };
                            dl[i * c + j] = w * (probs[i * c + j] - onehot - eps / c as f64);
                        }
                    }
                }
                Tensor::from_parts(t.shape().to_vec(), dl)
            }),
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if !self.rg(v) {
            return;
        }
        let g = f();
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Value and derivative of the tanh-approximated GELU.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, deriv)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    row.iter_mut().for_each(|z| *z = (*z - lse).exp());
}

/// Index of the largest entry; the first one wins ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: Vec<f64>) -> Var {
        g.leaf(Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut g = Graph::new();
        let data = vec![1.0, -2.0, 3.0, 0.25];
        let x = leaf(&mut g, &[4], data.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let want: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap().data(), &want[..]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], vec![1.0, 2.0, 3.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], vec![1.0, 2.0, 3.0]);
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 5, (0..10).map(f64::from).collect()).unwrap());
        let w = g.input(Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = g.conv1d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv1d_reports_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3, 8]));
        let w = g.input(Tensor::zeros(&[4, 2, 3]));
        let err = g.conv1d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("3 channels") && err.contains("expects 2"), "{err}");
    }

    #[test]
    fn layer_norm_of_constant_row_is_shift() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![4.0; 6]).unwrap());
        let gain = g.input(Tensor::vector(vec![2.0; 6]).unwrap());
        let shift = g.input(Tensor::vector((0..6).map(f64::from).collect()).unwrap());
        let y = g.layer_norm(x, gain, shift, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), g.value(shift).data());
    }

    #[test]
    fn layer_norm_two_values() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 3.0]).unwrap());
        let gain = g.input(Tensor::vector(vec![1.0; 2]).unwrap());
        let shift = g.input(Tensor::vector(vec![0.0; 2]).unwrap());
        let y = g.layer_norm(x, gain, shift, 1e-5).unwrap();
        // variance 1, so the normalized values are ±1/sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let out = g.value(y).data();
        assert!((out[0] + expect).abs() < 1e-12 && (out[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn attention_single_position_returns_value_row() {
        for causal in [false, true] {
            let mut g = Graph::new();
            let q = g.input(Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.1]).unwrap());
            let k = g.input(Tensor::matrix(1, 4, vec![1.0, 1.0, -1.0, 0.5]).unwrap());
            let v = g.input(Tensor::matrix(1, 4, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
            let y = g.attention(q, k, v, 2, causal).unwrap();
            assert_eq!(g.value(y).data(), &[5.0, 6.0, 7.0, 8.0]);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::new();
        let q = g.input(Tensor::zeros(&[2, 6]));
        assert!(matches!(g.attention(q, q, q, 4, false), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        for eps in [0.0, 0.3, 0.9] {
            let mut g = Graph::new();
            let z = g.input(Tensor::zeros(&[3, 32]));
            let l = g.smoothed_cross_entropy(z, &[Some(1), Some(4), None], eps).unwrap();
            assert!((g.value(l).item() - (32f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_through_is_one_hot_forward() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], vec![0.1, 0.9, 0.3, 2.0, -1.0, 2.0]);
        let y = g.straight_through_one_hot(x);
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}
