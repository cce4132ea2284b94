//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! topologically sorted by construction. [`Graph::backward`] walks it once in
//! reverse and leaves `∂loss/∂leaf` in the gradient slot of every leaf created
//! with [`Graph::param`]. A graph can be differentiated only once.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One block of rows attending to one block of keys.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

/// Per-key additive term applied inside [`Graph::attention`].
///
/// `scores` is a `1 × n_keys` variable. The same row is added to every query
/// row of a segment.
#[derive(Clone, Copy, Debug)]
pub enum KeyBias<T> {
    None,
    /// Keys with `score < tau` are dropped. With `straight_through`, `scores`
    /// receive the gradient the soft bias `logits + score` would get, so
    /// dropped keys keep a learning signal.
    Hard {
        scores: Var,
        tau: T,
        straight_through: bool,
    },
    /// `lambda · score` is added to the logits.
    Soft { scores: Var, lambda: T },
}

/// Cached attention probabilities of one segment.
#[derive(Clone, Debug)]
pub struct SegmentProbs<T> {
    pub segment: Segment,
    /// True when every key was dropped and the segment used unmasked attention.
    pub fallback: bool,
    /// `heads × n_queries × n_keys`, row-major.
    pub probs: Vec<T>,
    /// Probabilities with the scores added as a soft bias, kept for the
    /// straight-through backward of [`KeyBias::Hard`].
    surrogate: Vec<T>,
}

#[derive(Clone, Debug)]
struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: T,
    bias: KeyBias<T>,
    segments: Vec<SegmentProbs<T>>,
}

/// Two score rows compared under a soft label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairTarget {
    pub first: usize,
    pub second: usize,
    pub label: [f64; 2],
}

/// Lower clamp applied to predicted pair probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale { x: Var, factor: T },
    ScaleBy { x: Var, s: Var },
    ShiftBy { x: Var, s: Var },
    Gelu { x: Var, dy: Vec<T> },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    RowDot(Var, Var),
    Sum(Var),
    MaskedSoftmax { x: Var },
    Attention(Box<AttentionCache<T>>),
    PairKl { scores: Var, dscores: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    // x − x is NaN exactly when x is infinite or NaN; eight lanes let the
    // loop vectorize.
    let mut acc = [T::zero(); 8];
    let chunks = data.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            acc[k] = acc[k] + (c[k] - c[k]);
        }
    }
    for &x in tail {
        acc[0] = acc[0] + (x - x);
    }
    if acc.iter().all(|a| *a == T::zero()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Zero-initialized gradient buffer for `v`, or `None` if it needs no gradient.
fn grad_slot<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit(0.797_884_560_802_865_4);
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    // tanh(u) = 1 − 2/(e^{2u} + 1); saturates cleanly at ±1.
    let t = T::one() - T::lit(2.0) / ((inner + inner).exp() + T::one());
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

/// Softmax of `row` restricted to entries with `keep[j]`; dropped entries are
/// exactly zero. Returns `false` if nothing is kept.
pub(crate) fn softmax_into<T: Scalar>(row: &[T], keep: Option<&[bool]>, out: &mut [T]) -> bool {
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if kept(j) && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return false;
    }
    let mut total = T::zero();
    for (j, (&x, o)) in row.iter().zip(out.iter_mut()).enumerate() {
        if kept(j) {
            *o = (x - max).exp();
            total = total + *o;
        } else {
            *o = T::zero();
        }
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
    true
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2().expect("graph values are matrices")
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn emit(
        &mut self,
        op_name: &'static str,
        shape: [usize; 2],
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        check_finite(op_name, &data)?;
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, requires_grad))
    }

    /// Records a leaf. Gradients are kept for it if `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        t.dims2()?;
        check_finite("leaf", t.data())?;
        let rg = t.requires_grad();
        Ok(self.push(t, Op::Leaf, rg))
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, mut t: Tensor<T>) -> Result<Var> {
        t.set_requires_grad(true);
        t.clear_grad();
        self.leaf(t)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Result<Var> {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass for a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        let t = &mut self.nodes[v.0].value;
        let g = t.grad().map(<[T]>::to_vec);
        t.clear_grad();
        g
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{m}×{k} · {k2}×{n}: inner dimensions differ"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), trans_b, T::zero(), &mut out);
        self.emit("matmul", [m, n], out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let (r, c) = t.dims2()?;
        self.emit("transpose", [r, c], t.into_data(), Op::Transpose(x), &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        self.emit("add", [r, c], out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        self.emit("sub", [r, c], out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        self.emit("mul", [r, c], out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 × c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(row) != (1, c) {
            return Err(Error::shape(
                "add_row",
                format!("row {:?} for {r}×{c} input", self.dims(row)),
            ));
        }
        let b = self.data(row);
        let out = self
            .data(x)
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(b).map(|(&u, &w)| u + w))
            .collect();
        self.emit("add_row", [r, c], out, Op::AddRow { x, row }, &[x, row])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out = self.data(x).iter().map(|&u| u * factor).collect();
        self.emit("scale", [r, c], out, Op::Scale { x, factor }, &[x])
    }

    /// Multiplies every entry by the `1 × 1` variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(s) != (1, 1) {
            return Err(Error::shape("scale_by", "factor must be 1×1"));
        }
        let f = self.data(s)[0];
        let out = self.data(x).iter().map(|&u| u * f).collect();
        self.emit("scale_by", [r, c], out, Op::ScaleBy { x, s }, &[x, s])
    }

    /// Adds the `1 × 1` variable `s` to every entry.
    pub fn shift_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(s) != (1, 1) {
            return Err(Error::shape("shift_by", "shift must be 1×1"));
        }
        let f = self.data(s)[0];
        let out = self.data(x).iter().map(|&u| u + f).collect();
        self.emit("shift_by", [r, c], out, Op::ShiftBy { x, s }, &[x, s])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (out, dy) = self.data(x).iter().map(|&u| gelu_parts(u)).unzip();
        self.emit("gelu", [r, c], out, Op::Gelu { x, dy }, &[x])
    }

    /// Row-wise layer normalization with `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(Error::shape("layer_norm", "gain/bias must be 1×cols"));
        }
        let n = T::lit(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        let (g, b) = (self.data(gain), self.data(bias));
        for (i, xr) in self.data(x).chunks(c).enumerate() {
            let mean = xr.iter().copied().sum::<T>() / n;
            let var = xr.iter().map(|&u| (u - mean) * (u - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (xr[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.emit(
            "layer_norm",
            [r, c],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Selects rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.emit(
            "gather_rows",
            [idx.len(), c],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let c = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape("concat_rows", format!("{pc} vs {c} columns")));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        self.emit("concat_rows", [rows, c], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let r = self.dims(first).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::shape("concat_cols", format!("{pr} vs {r} rows")));
            }
            cols += pc;
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.data(p)[i * pc..(i + 1) * pc]);
            }
        }
        self.emit("concat_cols", [r, cols], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if cols.start >= cols.end || cols.end > c {
            return Err(Error::shape("slice_cols", format!("{cols:?} of {c} columns")));
        }
        let w = cols.end - cols.start;
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + cols.start..i * c + cols.end]);
        }
        self.emit(
            "slice_cols",
            [r, w],
            out,
            Op::SliceCols {
                x,
                start: cols.start,
            },
            &[x],
        )
    }

    /// Column-wise mean over rows: `r × c → 1 × c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let mut out = vec![T::zero(); c];
        for xr in self.data(x).chunks(c) {
            for (o, &u) in out.iter_mut().zip(xr) {
                *o = *o + u;
            }
        }
        let n = T::lit(r as f64);
        out.iter_mut().for_each(|o| *o = *o / n);
        self.emit("mean_rows", [1, c], out, Op::MeanRows(x), &[x])
    }

    /// Dot product of matching rows: `r × c, r × c → r × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("row_dot", a, b)?;
        let out = self
            .data(a)
            .chunks(c)
            .zip(self.data(b).chunks(c))
            .map(|(x, y)| x.iter().zip(y).map(|(&u, &w)| u * w).sum())
            .collect();
        self.emit("row_dot", [r, 1], out, Op::RowDot(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        self.emit("sum", [1, 1], vec![s], Op::Sum(x), &[x])
    }

    /// Row softmax over kept entries; dropped entries are exactly zero.
    ///
    /// Fails with [`Error::FullyMasked`] if any row has nothing kept.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &BinaryMask) -> Result<Var> {
        let (r, c) = self.dims(x);
        if (mask.rows(), mask.cols()) != (r, c) {
            return Err(Error::shape(
                "masked_softmax_rows",
                format!("mask {}×{} for {r}×{c} input", mask.rows(), mask.cols()),
            ));
        }
        let dead = mask.fully_masked_rows();
        if !dead.is_empty() {
            return Err(Error::FullyMasked { rows: dead });
        }
        let mut out = vec![T::zero(); r * c];
        for (i, (xr, or)) in self.data(x).chunks(c).zip(out.chunks_mut(c)).enumerate() {
            softmax_into(xr, Some(mask.row(i)), or);
        }
        self.emit(
            "masked_softmax_rows",
            [r, c],
            out,
            Op::MaskedSoftmax { x },
            &[x],
        )
    }

    /// Multi-head scaled dot-product attention over row segments.
    ///
    /// `q` is `n_q × d`, `k` and `v` are `n_k × d`. Each segment's query rows
    /// attend only to that segment's key rows; every query row must belong to
    /// exactly one segment. Logits are scaled by `1/√(d/heads)`. Under
    /// [`KeyBias::Hard`], a segment whose keys are all dropped falls back to
    /// unmasked attention; see [`Graph::attention_probs`].
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        bias: KeyBias<T>,
    ) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        if dk != d || self.dims(v) != (nk, d) {
            return Err(Error::shape(
                "attention",
                format!("q {nq}×{d}, k {nk}×{dk}, v {:?}", self.dims(v)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("{d} columns, {heads} heads")));
        }
        let mut covered = vec![false; nq];
        for s in segments {
            if s.queries.end > nq || s.keys.end > nk || s.keys.is_empty() || s.queries.is_empty() {
                return Err(Error::shape("attention", format!("bad segment {s:?}")));
            }
            for i in s.queries.clone() {
                if covered[i] {
                    return Err(Error::shape("attention", format!("query row {i} in two segments")));
                }
                covered[i] = true;
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::shape("attention", "query rows without a segment"));
        }
        let bias_scores = match bias {
            KeyBias::None => None,
            KeyBias::Hard { scores, .. } | KeyBias::Soft { scores, .. } => {
                if self.dims(scores) != (1, nk) {
                    return Err(Error::shape(
                        "attention",
                        format!("key bias {:?} for {nk} keys", self.dims(scores)),
                    ));
                }
                Some(self.data(scores).to_vec())
            }
        };
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::zero(); nq * d];
        let mut cached = Vec::with_capacity(segments.len());
        let mut logits = Vec::new();
        for seg in segments {
            let sq = seg.queries.len();
            let sk = seg.keys.len();
            let keep: Option<Vec<bool>> = match (bias, &bias_scores) {
                (KeyBias::Hard { tau, .. }, Some(b)) => {
                    Some(seg.keys.clone().map(|j| b[j] >= tau).collect())
                }
                _ => None,
            };
            let fallback = keep.as_ref().is_some_and(|kp| kp.iter().all(|x| !x));
            let keep = if fallback { None } else { keep };
            let mut probs = vec![T::zero(); heads * sq * sk];
            let st = matches!(bias, KeyBias::Hard { straight_through: true, .. });
            let mut surrogate = if st { vec![T::zero(); heads * sq * sk] } else { Vec::new() };
            logits.resize(sk, T::zero());
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for (qi, i) in seg.queries.clone().enumerate() {
                    let qrow = &qd[i * d + cols.start..i * d + cols.end];
                    for (kj, j) in seg.keys.clone().enumerate() {
                        let krow = &kd[j * d + cols.start..j * d + cols.end];
                        let mut dot = T::zero();
                        for t in 0..dh {
                            dot = dot + qrow[t] * krow[t];
                        }
                        let mut l = dot * scale;
                        if let (KeyBias::Soft { lambda, .. }, Some(b)) = (bias, &bias_scores) {
                            l = l + lambda * b[j];
                        }
                        logits[kj] = l;
                    }
                    let p = &mut probs[(h * sq + qi) * sk..(h * sq + qi + 1) * sk];
                    softmax_into(&logits, keep.as_deref(), p);
                    if let (true, Some(b)) = (st, &bias_scores) {
                        let biased: Vec<T> = seg.keys.clone().zip(&logits).map(|(j, &l)| l + b[j]).collect();
                        softmax_into(&biased, None, &mut surrogate[(h * sq + qi) * sk..(h * sq + qi + 1) * sk]);
                    }
                    let orow = &mut out[i * d + cols.start..i * d + cols.end];
                    for (kj, j) in seg.keys.clone().enumerate() {
                        let w = p[kj];
                        if w == T::zero() {
                            continue;
                        }
                        let vrow = &vd[j * d + cols.start..j * d + cols.end];
                        for t in 0..dh {
                            orow[t] = orow[t] + w * vrow[t];
                        }
                    }
                }
            }
            cached.push(SegmentProbs {
                segment: seg.clone(),
                fallback,
                probs,
                surrogate,
            });
        }
        let mut inputs = vec![q, k, v];
        if let KeyBias::Hard { scores, .. } | KeyBias::Soft { scores, .. } = bias {
            inputs.push(scores);
        }
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            scale,
            bias,
            segments: cached,
        };
        self.emit("attention", [nq, d], out, Op::Attention(Box::new(cache)), &inputs)
    }

    /// Per-segment probabilities recorded by an [`Graph::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[SegmentProbs<T>]> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(&c.segments),
            _ => None,
        }
    }

    /// Pairwise KL objective over an `n × 1` score column.
    ///
    /// For each target the two scores are softmax-normalized into `p̂`, and
    /// `Σᵢ pᵢ (ln pᵢ − ln p̂ᵢ)` is accumulated with `0 · ln 0 = 0` and `p̂`
    /// clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`. The total is divided by
    /// `normalizer`.
    pub fn pair_kl(&mut self, scores: Var, targets: &[PairTarget], normalizer: f64) -> Result<Var> {
        let (n, c) = self.dims(scores);
        if c != 1 {
            return Err(Error::shape("pair_kl", "scores must be a column"));
        }
        if targets.is_empty() || normalizer <= 0.0 {
            return Err(Error::invalid("pair_kl needs targets and a positive normalizer"));
        }
        let s = self.data(scores);
        let lo = PROB_CLAMP.ln();
        let hi = (1.0 - PROB_CLAMP).ln();
        let mut total = 0.0f64;
        let mut ds = vec![0.0f64; n];
        for t in targets {
            if t.first >= n || t.second >= n {
                return Err(Error::shape("pair_kl", "target index out of range"));
            }
            let sc = [s[t.first].as_f64(), s[t.second].as_f64()];
            let m = sc[0].max(sc[1]);
            let lse = m + ((sc[0] - m).exp() + (sc[1] - m).exp()).ln();
            let phat = [(sc[0] - lse).exp(), (sc[1] - lse).exp()];
            let idx = [t.first, t.second];
            for i in 0..2 {
                let p = t.label[i];
                if p == 0.0 {
                    continue;
                }
                let raw = sc[i] - lse;
                let lp = raw.clamp(lo, hi);
                total += p * (p.ln() - lp);
                if raw > lo && raw < hi {
                    // d(−p·ln p̂ᵢ)/ds_k = −p (δᵢₖ − p̂ₖ)
                    for kk in 0..2 {
                        let delta = if kk == i { 1.0 } else { 0.0 };
                        ds[idx[kk]] += -p * (delta - phat[kk]) / normalizer;
                    }
                }
            }
        }
        let loss = total / normalizer;
        let dscores = ds.into_iter().map(T::lit).collect();
        self.emit(
            "pair_kl",
            [1, 1],
            vec![T::lit(loss)],
            Op::PairKl { scores, dscores },
            &[scores],
        )
    }

    /// Back-propagates from a scalar `loss`. Consumes the graph: a second call
    /// fails.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.set_grad(g)?;
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(&self.nodes, grads, $v) {
                    $body
                }
            };
        }
        let (rows, cols) = self.dims(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(*a);
                let n = cols;
                with_grad!(*a, |buf| {
                    // dA = G · Bᵀ (or G · B when b was transposed)
                    gemm(m, n, k, g, false, self.data(*b), !*trans_b, T::one(), buf);
                });
                with_grad!(*b, |buf| {
                    if *trans_b {
                        // B is n×k: dB = Gᵀ · A
                        gemm(n, m, k, g, true, self.data(*a), false, T::one(), buf);
                    } else {
                        gemm(k, m, n, self.data(*a), true, g, false, T::one(), buf);
                    }
                });
            }
            Op::Transpose(x) => {
                with_grad!(*x, |buf| {
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[c * rows + r] = buf[c * rows + r] + g[r * cols + c];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d);
                });
                with_grad!(*b, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d);
                });
                with_grad!(*b, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &d)| *o = *o - d);
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                with_grad!(*a, |buf| {
                    for j in 0..g.len() {
                        buf[j] = buf[j] + g[j] * db[j];
                    }
                });
                with_grad!(*b, |buf| {
                    for j in 0..g.len() {
                        buf[j] = buf[j] + g[j] * da[j];
                    }
                });
            }
            Op::AddRow { x, row } => {
                with_grad!(*x, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d);
                });
                with_grad!(*row, |buf| {
                    for gr in g.chunks(cols) {
                        buf.iter_mut().zip(gr).for_each(|(o, &d)| *o = *o + d);
                    }
                });
            }
            Op::Scale { x, factor } => {
                with_grad!(*x, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * *factor);
                });
            }
            Op::ScaleBy { x, s } => {
                let f = self.data(*s)[0];
                with_grad!(*x, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * f);
                });
                with_grad!(*s, |buf| {
                    let dot: T = g.iter().zip(self.data(*x)).map(|(&d, &u)| d * u).sum();
                    buf[0] = buf[0] + dot;
                });
            }
            Op::ShiftBy { x, s } => {
                with_grad!(*x, |buf| {
                    buf.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d);
                });
                with_grad!(*s, |buf| {
                    buf[0] = buf[0] + g.iter().copied().sum();
                });
            }
            Op::Gelu { x, dy } => {
                with_grad!(*x, |buf| {
                    for j in 0..g.len() {
                        buf[j] = buf[j] + g[j] * dy[j];
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.data(*gain);
                let n = T::lit(cols as f64);
                with_grad!(*x, |buf| {
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..cols {
                            let dh = gr[j] * gv[j];
                            mean_d = mean_d + dh;
                            mean_dh = mean_dh + dh * hr[j];
                        }
                        mean_d = mean_d / n;
                        mean_dh = mean_dh / n;
                        for j in 0..cols {
                            let dh = gr[j] * gv[j];
                            let o = &mut buf[r * cols + j];
                            *o = *o + rstd[r] * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
                with_grad!(*gain, |buf| {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            buf[j] = buf[j] + gr[j] * hr[j];
                        }
                    }
                });
                with_grad!(*bias, |buf| {
                    for gr in g.chunks(cols) {
                        buf.iter_mut().zip(gr).for_each(|(o, &d)| *o = *o + d);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                with_grad!(*x, |buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            buf[src * cols + j] = buf[src * cols + j] + g[r * cols + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    with_grad!(p, |buf| {
                        buf.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(o, &d)| *o = *o + d);
                    });
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    with_grad!(p, |buf| {
                        for r in 0..rows {
                            for j in 0..pc {
                                buf[r * pc + j] = buf[r * pc + j] + g[r * cols + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let xc = self.dims(*x).1;
                with_grad!(*x, |buf| {
                    for r in 0..rows {
                        for j in 0..cols {
                            buf[r * xc + start + j] = buf[r * xc + start + j] + g[r * cols + j];
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let xr = self.dims(*x).0;
                let n = T::lit(xr as f64);
                with_grad!(*x, |buf| {
                    for r in 0..xr {
                        for j in 0..cols {
                            buf[r * cols + j] = buf[r * cols + j] + g[j] / n;
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let c = self.dims(*a).1;
                let (da, db) = (self.data(*a), self.data(*b));
                with_grad!(*a, |buf| {
                    for r in 0..rows {
                        for j in 0..c {
                            buf[r * c + j] = buf[r * c + j] + g[r] * db[r * c + j];
                        }
                    }
                });
                with_grad!(*b, |buf| {
                    for r in 0..rows {
                        for j in 0..c {
                            buf[r * c + j] = buf[r * c + j] + g[r] * da[r * c + j];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |buf| {
                    buf.iter_mut().for_each(|o| *o = *o + g[0]);
                });
            }
            Op::MaskedSoftmax { x } => {
                let y = self.data(Var(i));
                with_grad!(*x, |buf| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            buf[r * cols + j] = buf[r * cols + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Attention(cache) => self.backprop_attention(cache, g, grads),
            Op::PairKl { scores, dscores } => {
                with_grad!(*scores, |buf| {
                    for (o, &d) in buf.iter_mut().zip(dscores) {
                        *o = *o + g[0] * d;
                    }
                });
            }
        }
    }

    fn backprop_attention(
        &self,
        cache: &AttentionCache<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (_, d) = self.dims(cache.q);
        let dh = d / cache.heads;
        let (qd, kd, vd) = (self.data(cache.q), self.data(cache.k), self.data(cache.v));
        let nq = self.value(cache.q).len();
        let nk = self.value(cache.k).len();
        let mut dq = vec![T::zero(); nq];
        let mut dk = vec![T::zero(); nk];
        let mut dv = vec![T::zero(); nk];
        let n_keys = self.dims(cache.k).0;
        let mut dbias = vec![T::zero(); n_keys];
        let mut dp = Vec::new();
        let mut dl = Vec::new();
        for sp in &cache.segments {
            let seg = &sp.segment;
            let (sq, sk) = (seg.queries.len(), seg.keys.len());
            dp.resize(sk, T::zero());
            dl.resize(sk, T::zero());
            for h in 0..cache.heads {
                let c0 = h * dh;
                for (qi, i) in seg.queries.clone().enumerate() {
                    let p = &sp.probs[(h * sq + qi) * sk..(h * sq + qi + 1) * sk];
                    let grow = &g[i * d + c0..i * d + c0 + dh];
                    let mut dot = T::zero();
                    for (kj, j) in seg.keys.clone().enumerate() {
                        let vrow = &vd[j * d + c0..j * d + c0 + dh];
                        let mut s = T::zero();
                        for t in 0..dh {
                            s = s + grow[t] * vrow[t];
                        }
                        dp[kj] = s;
                        dot = dot + p[kj] * s;
                        if p[kj] != T::zero() {
                            let dvrow = &mut dv[j * d + c0..j * d + c0 + dh];
                            for t in 0..dh {
                                dvrow[t] = dvrow[t] + p[kj] * grow[t];
                            }
                        }
                    }
                    for kj in 0..sk {
                        dl[kj] = p[kj] * (dp[kj] - dot);
                    }
                    if !sp.surrogate.is_empty() {
                        let ps = &sp.surrogate[(h * sq + qi) * sk..(h * sq + qi + 1) * sk];
                        let sdot: T = ps.iter().zip(dp.iter()).map(|(&a, &b)| a * b).sum();
                        for (kj, j) in seg.keys.clone().enumerate() {
                            dbias[j] = dbias[j] + ps[kj] * (dp[kj] - sdot);
                        }
                    }
                    let qrow = &qd[i * d + c0..i * d + c0 + dh];
                    for (kj, j) in seg.keys.clone().enumerate() {
                        let w = dl[kj];
                        if w == T::zero() {
                            continue;
                        }
                        if let KeyBias::Soft { lambda, .. } = cache.bias {
                            dbias[j] = dbias[j] + lambda * w;
                        }
                        let ws = w * cache.scale;
                        let krow = &kd[j * d + c0..j * d + c0 + dh];
                        for t in 0..dh {
                            dq[i * d + c0 + t] = dq[i * d + c0 + t] + ws * krow[t];
                            dk[j * d + c0 + t] = dk[j * d + c0 + t] + ws * qrow[t];
                        }
                    }
                }
            }
        }
        let mut add = |v: Var, src: &[T]| {
            if let Some(buf) = grad_slot(&self.nodes, grads, v) {
                buf.iter_mut().zip(src).for_each(|(o, &x)| *o = *o + x);
            }
        };
        add(cache.q, &dq);
        add(cache.k, &dk);
        add(cache.v, &dv);
        match cache.bias {
            KeyBias::Hard {
                scores,
                straight_through: true,
                ..
            }
            | KeyBias::Soft { scores, .. } => add(scores, &dbias),
            _ => {}
        }
    }
}
