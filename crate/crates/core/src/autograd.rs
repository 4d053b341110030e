//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every forward op in creation order, which is already a
//! topological order. [`Tape::backward`] walks the record once in reverse and
//! accumulates adjoints additively, so fan-out is handled without special
//! casing. Tapes are single-use: build one per forward pass.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm_abt_acc, gemm_acc, gemm_atb_acc, Tensor};

/// Lower clamp applied to `log` inputs.
pub const LOG_CLAMP: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Square,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    Unary(usize, Unary),
    SoftmaxRows(usize),
    ConcatCols(usize, usize),
    ConcatRows(Vec<usize>),
    Transpose(usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterAddRows(usize, Rc<[usize]>),
    ScaleRows(usize, Rc<[f64]>),
    HeadDot(usize, usize, usize),
    HeadScale(usize, usize, usize),
    SegmentSoftmax(usize, Rc<[usize]>, usize),
    SeqAttention(Box<SeqAttn>),
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Unary(_, Unary::Relu) => "relu",
            Op::Unary(_, Unary::Sigmoid) => "sigmoid",
            Op::Unary(_, Unary::Square) => "square",
            Op::Unary(_, Unary::Log) => "log",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::ConcatCols(..) => "concat",
            Op::ConcatRows(..) => "concat_rows",
            Op::Transpose(..) => "transpose",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::ScaleRows(..) => "scale_rows",
            Op::HeadDot(..) => "head_dot",
            Op::HeadScale(..) => "head_scale",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::SeqAttention(..) => "seq_attention",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

/// Saved state of a fused sequence self-attention.
#[derive(Debug)]
struct SeqAttn {
    q: usize,
    k: usize,
    v: usize,
    segments: Rc<[(usize, usize)]>,
    mask: Rc<[bool]>,
    heads: usize,
    scale: f64,
    /// Per segment and head, a `len × len` block of attention weights.
    probs: Vec<f64>,
    prob_offsets: Vec<usize>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it participates in differentiation iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push_unchecked(tensor, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::DetachedTape);
        }
        Ok(v.idx)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b)
            | Op::HeadDot(a, b, _)
            | Op::HeadScale(a, b, _) => self.nodes[*a].requires_grad || self.nodes[*b].requires_grad,
            Op::ConcatRows(parts) => parts.iter().any(|&p| self.nodes[p].requires_grad),
            Op::SeqAttention(sa) => [sa.q, sa.k, sa.v].iter().any(|&p| self.nodes[p].requires_grad),
            Op::Affine(a, _)
            | Op::Unary(a, _)
            | Op::SoftmaxRows(a)
            | Op::Transpose(a)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::ScaleRows(a, _)
            | Op::SegmentSoftmax(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a) => self.nodes[*a].requires_grad,
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn matrix_dims(&self, idx: usize, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[idx].value;
        if t.shape().len() > 2 {
            return Err(shape_err(op, format!("expected rank ≤ 2, got {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.matrix_dims(ia, "matmul")?;
        let (k2, n) = self.matrix_dims(ib, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}×{k} · {k2}×{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(ia, ib))
    }

    fn binary_same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok((ia, ib))
    }

    fn zip_map(&self, ia: usize, ib: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape(a, b, "add")?;
        let t = self.zip_map(ia, ib, |x, y| x + y);
        self.push(t, Op::Add(ia, ib))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape(a, b, "sub")?;
        let t = self.zip_map(ia, ib, |x, y| x - y);
        self.push(t, Op::Sub(ia, ib))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape(a, b, "mul")?;
        let t = self.zip_map(ia, ib, |x, y| x * y);
        self.push(t, Op::Mul(ia, ib))
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        let data = src.data().iter().map(|&x| scale * x + shift).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push(t, Op::Affine(ia, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        let map: fn(f64) -> f64 = match f {
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => sigmoid,
            Unary::Square => |x| x * x,
            Unary::Log => |x| x.max(LOG_CLAMP).ln(),
        };
        let data = src.data().iter().map(|&x| map(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push(t, Op::Unary(ia, f))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.matrix_dims(ia, "softmax_rows")?;
        let src = &self.nodes[ia].value;
        if src.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut out = src.data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        self.push(t, Op::SoftmaxRows(ia))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (m, p) = self.matrix_dims(ia, "concat")?;
        let (m2, q) = self.matrix_dims(ib, "concat")?;
        if m != m2 {
            return Err(shape_err("concat", format!("{m} rows vs {m2} rows")));
        }
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(&da[r * p..(r + 1) * p]);
            out.extend_from_slice(&db[r * q..(r + 1) * q]);
        }
        self.push(Tensor::matrix(m, p + q, out)?, Op::ConcatCols(ia, ib))
    }

    /// Row-wise stacking of matrices sharing a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs"));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let cols = self.nodes[idx[0]].value.cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &i in &idx {
            let (r, c) = self.matrix_dims(i, "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("{c} cols vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.nodes[i].value.data());
        }
        self.push(Tensor::matrix(rows, cols, out)?, Op::ConcatRows(idx))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, n) = self.matrix_dims(ia, "transpose")?;
        let src = self.nodes[ia].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::matrix(n, m, out)?, Op::Transpose(ia))
    }

    /// Selects rows `idx` of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, d) = self.matrix_dims(ia, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {m}")));
        }
        let src = self.nodes[ia].value.data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(Tensor::matrix(idx.len(), d, out)?, Op::GatherRows(ia, idx))
    }

    /// Sums row `e` of `a` into output row `idx[e]`; output has `n_out` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, n_out: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, d) = self.matrix_dims(ia, "scatter_add_rows")?;
        if idx.len() != m {
            return Err(shape_err("scatter_add_rows", format!("{} indices for {m} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(shape_err("scatter_add_rows", format!("target {bad} out of {n_out}")));
        }
        let src = self.nodes[ia].value.data();
        let mut out = vec![0.0; n_out * d];
        for (e, &t) in idx.iter().enumerate() {
            for (o, &s) in out[t * d..(t + 1) * d].iter_mut().zip(&src[e * d..(e + 1) * d]) {
                *o += s;
            }
        }
        self.push(Tensor::matrix(n_out, d, out)?, Op::ScatterAddRows(ia, idx))
    }

    /// Multiplies row `r` by the constant `w[r]`.
    pub fn scale_rows(&mut self, a: Var, w: Rc<[f64]>) -> Result<Var> {
        let ia = self.check(a)?;
        let (m, d) = self.matrix_dims(ia, "scale_rows")?;
        if w.len() != m {
            return Err(shape_err("scale_rows", format!("{} weights for {m} rows", w.len())));
        }
        let src = self.nodes[ia].value.data();
        let mut out = src.to_vec();
        for (r, &wr) in w.iter().enumerate() {
            out[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= wr);
        }
        self.push(Tensor::matrix(m, d, out)?, Op::ScaleRows(ia, w))
    }

    /// Per-head row dot products: `a, b: E×(H·c)` → `E×H`.
    pub fn head_dot(&mut self, a: Var, b: Var, heads: usize) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape(a, b, "head_dot")?;
        let (e, w) = self.matrix_dims(ia, "head_dot")?;
        if heads == 0 || w % heads != 0 {
            return Err(shape_err("head_dot", format!("width {w} not divisible by {heads} heads")));
        }
        let c = w / heads;
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = vec![0.0; e * heads];
        for r in 0..e {
            for h in 0..heads {
                let off = r * w + h * c;
                out[r * heads + h] = da[off..off + c].iter().zip(&db[off..off + c]).map(|(x, y)| x * y).sum();
            }
        }
        self.push(Tensor::matrix(e, heads, out)?, Op::HeadDot(ia, ib, heads))
    }

    /// Scales each head block of `v: E×(H·c)` by `w: E×H`.
    pub fn head_scale(&mut self, v: Var, w: Var, heads: usize) -> Result<Var> {
        let (iv, iw) = (self.check(v)?, self.check(w)?);
        let (e, width) = self.matrix_dims(iv, "head_scale")?;
        let (e2, h2) = self.matrix_dims(iw, "head_scale")?;
        if e != e2 || h2 != heads || heads == 0 || width % heads != 0 {
            return Err(shape_err("head_scale", format!("values {e}×{width}, weights {e2}×{h2}, {heads} heads")));
        }
        let c = width / heads;
        let (dv, dw) = (self.nodes[iv].value.data(), self.nodes[iw].value.data());
        let mut out = dv.to_vec();
        for r in 0..e {
            for h in 0..heads {
                let s = dw[r * heads + h];
                let off = r * width + h * c;
                out[off..off + c].iter_mut().for_each(|x| *x *= s);
            }
        }
        self.push(Tensor::matrix(e, width, out)?, Op::HeadScale(iv, iw, heads))
    }

    /// Softmax of each column over the rows sharing a segment id.
    pub fn segment_softmax(&mut self, a: Var, seg: Rc<[usize]>, n_seg: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (e, h) = self.matrix_dims(ia, "segment_softmax")?;
        if seg.len() != e {
            return Err(shape_err("segment_softmax", format!("{} segment ids for {e} rows", seg.len())));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_seg) {
            return Err(shape_err("segment_softmax", format!("segment {bad} out of {n_seg}")));
        }
        let src = self.nodes[ia].value.data();
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "segment_softmax" });
        }
        let mut max = vec![f64::NEG_INFINITY; n_seg * h];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..h {
                let m = &mut max[s * h + c];
                *m = m.max(src[r * h + c]);
            }
        }
        let mut out = vec![0.0; e * h];
        let mut denom = vec![0.0; n_seg * h];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..h {
                let v = (src[r * h + c] - max[s * h + c]).exp();
                out[r * h + c] = v;
                denom[s * h + c] += v;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..h {
                out[r * h + c] /= denom[s * h + c];
            }
        }
        self.push(Tensor::matrix(e, h, out)?, Op::SegmentSoftmax(ia, seg, n_seg))
    }

    /// Multi-head self-attention within row segments.
    ///
    /// `q, k, v: R×D`; each `(start, len)` segment attends only to itself and
    /// rows with `mask = false` are excluded as keys. Output rows of masked
    /// positions are zero. Scores are `scale · q_i·k_j` per head.
    pub fn seq_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Rc<[(usize, usize)]>,
        mask: Rc<[bool]>,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let (iq, ik) = self.binary_same_shape(q, k, "seq_attention")?;
        let (_, iv) = self.binary_same_shape(q, v, "seq_attention")?;
        let (r, d) = self.matrix_dims(iq, "seq_attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("seq_attention", format!("width {d} not divisible by {heads} heads")));
        }
        if mask.len() != r {
            return Err(shape_err("seq_attention", format!("{} mask entries for {r} rows", mask.len())));
        }
        let c = d / heads;
        let (dq, dk, dv) = (
            self.nodes[iq].value.data(),
            self.nodes[ik].value.data(),
            self.nodes[iv].value.data(),
        );
        let mut out = vec![0.0; r * d];
        let mut probs = Vec::new();
        let mut prob_offsets = Vec::with_capacity(segments.len());
        let mut scores = Vec::new();
        for &(start, len) in segments.iter() {
            if start + len > r {
                return Err(shape_err("seq_attention", format!("segment {start}+{len} beyond {r} rows")));
            }
            if !mask[start..start + len].iter().any(|&m| m) {
                return Err(Error::InvalidArgument(format!("segment at row {start} is fully masked")));
            }
            prob_offsets.push(probs.len());
            let base = probs.len();
            probs.resize(base + heads * len * len, 0.0);
            for h in 0..heads {
                for i in 0..len {
                    if !mask[start + i] {
                        continue;
                    }
                    let qi = &dq[(start + i) * d + h * c..(start + i) * d + (h + 1) * c];
                    scores.clear();
                    for j in 0..len {
                        if mask[start + j] {
                            let kj = &dk[(start + j) * d + h * c..(start + j) * d + (h + 1) * c];
                            scores.push(scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>());
                        } else {
                            scores.push(f64::NEG_INFINITY);
                        }
                    }
                    softmax_in_place(&mut scores);
                    let row = &mut probs[base + (h * len + i) * len..base + (h * len + i + 1) * len];
                    row.copy_from_slice(&scores);
                    let o = &mut out[(start + i) * d + h * c..(start + i) * d + (h + 1) * c];
                    for (j, &p) in row.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &dv[(start + j) * d + h * c..(start + j) * d + (h + 1) * c];
                        o.iter_mut().zip(vj).for_each(|(x, y)| *x += p * y);
                    }
                }
            }
        }
        let op = Op::SeqAttention(Box::new(SeqAttn {
            q: iq,
            k: ik,
            v: iv,
            segments,
            mask,
            heads,
            scale,
            probs,
            prob_offsets,
        }));
        self.push(Tensor::matrix(r, d, out)?, op)
    }

    /// Attention weights saved by a [`Tape::seq_attention`] result: per
    /// segment, per head, `len × len` row-major. Masked query rows are zero.
    pub fn seq_attention_probs(&self, v: Var) -> Option<(&[f64], &[usize])> {
        let i = self.check(v).ok()?;
        match &self.nodes[i].op {
            Op::SeqAttention(sa) => Some((&sa.probs, &sa.prob_offsets)),
            _ => None,
        }
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(ia))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if t.numel() == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(ia))
    }

    /// Populates gradients of every `requires_grad` leaf reachable from
    /// `loss`. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[il].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![1.0]);

        for i in (0..=il).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        macro_rules! with_grad {
            ($j:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = grad_slot(nodes, grads, $j) {
                    $body
                }
            };
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                with_grad!(*a, |ga| gemm_abt_acc(g, tb.data(), ga, m, n, k));
                with_grad!(*b, |gb| gemm_atb_acc(ta.data(), g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| add_into(ga, g));
                with_grad!(*b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| add_into(ga, g));
                with_grad!(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (da, db) = (nodes[*a].value.data(), nodes[*b].value.data());
                with_grad!(*a, |ga| {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(db) {
                        *x += gy * bv;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(da) {
                        *x += gy * av;
                    }
                });
            }
            Op::Affine(a, s) => {
                with_grad!(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::Unary(a, f) => {
                let inp = nodes[*a].value.data();
                let y = out.data();
                with_grad!(*a, |ga| {
                    for k in 0..ga.len() {
                        let d = match f {
                            Unary::Relu => {
                                if inp[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y[k] * (1.0 - y[k]),
                            Unary::Square => 2.0 * inp[k],
                            Unary::Log => {
                                if inp[k] > LOG_CLAMP {
                                    1.0 / inp[k]
                                } else {
                                    0.0
                                }
                            }
                        };
                        ga[k] += g[k] * d;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (out.rows(), out.cols());
                let y = out.data();
                with_grad!(*a, |ga| {
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                        for k in row {
                            ga[k] += y[k] * (g[k] - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (nodes[*a].value.cols(), nodes[*b].value.cols());
                let m = out.rows();
                with_grad!(*a, |ga| {
                    for r in 0..m {
                        add_into(&mut ga[r * p..(r + 1) * p], &g[r * (p + q)..r * (p + q) + p]);
                    }
                });
                with_grad!(*b, |gb| {
                    for r in 0..m {
                        add_into(&mut gb[r * q..(r + 1) * q], &g[r * (p + q) + p..(r + 1) * (p + q)]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.numel();
                    with_grad!(p, |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                with_grad!(*a, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let d = out.cols();
                with_grad!(*a, |ga| {
                    for (e, &src) in idx.iter().enumerate() {
                        add_into(&mut ga[src * d..(src + 1) * d], &g[e * d..(e + 1) * d]);
                    }
                });
            }
            Op::ScatterAddRows(a, idx) => {
                let d = out.cols();
                with_grad!(*a, |ga| {
                    for (e, &t) in idx.iter().enumerate() {
                        add_into(&mut ga[e * d..(e + 1) * d], &g[t * d..(t + 1) * d]);
                    }
                });
            }
            Op::ScaleRows(a, w) => {
                let d = out.cols();
                with_grad!(*a, |ga| {
                    for (r, &wr) in w.iter().enumerate() {
                        for k in r * d..(r + 1) * d {
                            ga[k] += wr * g[k];
                        }
                    }
                });
            }
            Op::HeadDot(a, b, heads) => {
                let (da, db) = (nodes[*a].value.data(), nodes[*b].value.data());
                let w = nodes[*a].value.cols();
                let c = w / heads;
                let e = out.rows();
                let spread = |dst: &mut [f64], other: &[f64]| {
                    for r in 0..e {
                        for h in 0..*heads {
                            let gy = g[r * heads + h];
                            let off = r * w + h * c;
                            for k in off..off + c {
                                dst[k] += gy * other[k];
                            }
                        }
                    }
                };
                with_grad!(*a, |ga| spread(ga, db));
                with_grad!(*b, |gb| spread(gb, da));
            }
            Op::HeadScale(v, w, heads) => {
                let (dv, dw) = (nodes[*v].value.data(), nodes[*w].value.data());
                let width = out.cols();
                let c = width / heads;
                let e = out.rows();
                with_grad!(*v, |gv| {
                    for r in 0..e {
                        for h in 0..*heads {
                            let s = dw[r * heads + h];
                            let off = r * width + h * c;
                            for k in off..off + c {
                                gv[k] += s * g[k];
                            }
                        }
                    }
                });
                with_grad!(*w, |gw| {
                    for r in 0..e {
                        for h in 0..*heads {
                            let off = r * width + h * c;
                            let s: f64 = (off..off + c).map(|k| g[k] * dv[k]).sum();
                            gw[r * heads + h] += s;
                        }
                    }
                });
            }
            Op::SegmentSoftmax(a, seg, n_seg) => {
                let h = out.cols();
                let y = out.data();
                let mut dot = vec![0.0; n_seg * h];
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..h {
                        dot[s * h + c] += g[r * h + c] * y[r * h + c];
                    }
                }
                with_grad!(*a, |ga| {
                    for (r, &s) in seg.iter().enumerate() {
                        for c in 0..h {
                            let k = r * h + c;
                            ga[k] += y[k] * (g[k] - dot[s * h + c]);
                        }
                    }
                });
            }
            Op::SeqAttention(sa) => {
                let (dq, dk, dv) = (nodes[sa.q].value.data(), nodes[sa.k].value.data(), nodes[sa.v].value.data());
                let d = out.cols();
                let heads = sa.heads;
                let c = d / heads;
                let n = out.numel();
                let mut gq = vec![0.0; n];
                let mut gk = vec![0.0; n];
                let mut gv = vec![0.0; n];
                let mut dp = Vec::new();
                for (s_idx, &(start, len)) in sa.segments.iter().enumerate() {
                    let base = sa.prob_offsets[s_idx];
                    for h in 0..heads {
                        for i in 0..len {
                            if !sa.mask[start + i] {
                                continue;
                            }
                            let p = &sa.probs[base + (h * len + i) * len..base + (h * len + i + 1) * len];
                            let gi = &g[(start + i) * d + h * c..(start + i) * d + (h + 1) * c];
                            dp.clear();
                            for j in 0..len {
                                let vj = &dv[(start + j) * d + h * c..(start + j) * d + (h + 1) * c];
                                dp.push(gi.iter().zip(vj).map(|(x, y)| x * y).sum::<f64>());
                                if p[j] != 0.0 {
                                    let gvj = &mut gv[(start + j) * d + h * c..(start + j) * d + (h + 1) * c];
                                    gvj.iter_mut().zip(gi).for_each(|(x, y)| *x += p[j] * y);
                                }
                            }
                            let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..len {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = sa.scale * p[j] * (dp[j] - mean);
                                let (qo, ko) = ((start + i) * d + h * c, (start + j) * d + h * c);
                                for t in 0..c {
                                    gq[qo + t] += ds * dk[ko + t];
                                    gk[ko + t] += ds * dq[qo + t];
                                }
                            }
                        }
                    }
                }
                with_grad!(sa.q, |buf| add_into(buf, &gq));
                with_grad!(sa.k, |buf| add_into(buf, &gk));
                with_grad!(sa.v, |buf| add_into(buf, &gv));
            }
            Op::Sum(a) => {
                let gy = g[0];
                with_grad!(*a, |ga| ga.iter_mut().for_each(|x| *x += gy));
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.numel() as f64;
                let gy = g[0] / n;
                with_grad!(*a, |ga| ga.iter_mut().for_each(|x| *x += gy));
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], j: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[j].requires_grad {
        return None;
    }
    Some(grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax of a slice, in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    xs.iter_mut().for_each(|x| *x /= z);
}
