//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to apply its local gradient rule. Nodes are only ever appended, so
//! the tape is in topological order by construction and `backward` is a
//! single reverse sweep.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use super::param::{ParamId, Parameter};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise unary operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Exp,
    Log,
    Tanh,
    Neg,
}

/// Elementwise binary operations with restricted broadcasting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Offset(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SoftCrossEntropy { logits: Var, targets: Tensor, probs: Vec<f64> },
    KlDivergence { q: Var, p: Vec<f64>, q_probs: Vec<f64>, mask: Vec<bool> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    EmbeddingMean { table: Var, seqs: Vec<Vec<usize>> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, tokens: usize, heads: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (n / cols, cols)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if nb == 1 {
        return Ok(a.to_vec());
    }
    if na == 1 {
        return Ok(b.to_vec());
    }
    let row_of = |big: &[usize], small: &[usize]| {
        big.len() >= 2
            && (small == &big[1..]
                || (small.len() == big.len() && small[0] == 1 && small[1..] == big[1..]))
    };
    if row_of(a, b) {
        return Ok(a.to_vec());
    }
    if row_of(b, a) {
        return Ok(b.to_vec());
    }
    Err(Error::dim(op, a, b))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a plain tensor over its last dimension.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let (rows, cols) = rows_cols(t.shape());
    let mut out = vec![0.0; t.numel()];
    for r in 0..rows {
        softmax_row(&t.data()[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

impl Tape {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf input; with `requires_grad` its gradient is reported by
    /// [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Loads a parameter. Loading the same parameter twice returns the same
    /// node so its gradient contributions are summed.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.param_vars.get(&p.id()) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Param, true);
        self.param_vars.insert(p.id(), v);
        v
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let shape = broadcast_shape(name, self.value(a).shape(), self.value(b).shape())?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let (na, nb) = (ad.len(), bd.len());
        let n: usize = shape.iter().product();
        let f = match op {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let out = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Elementwise unary op. `Log` of a non-positive entry is a domain error.
    pub fn unary(&mut self, op: Unary, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = match op {
            Unary::Relu => v.map(|a| if a > 0.0 { a } else { 0.0 }),
            Unary::Exp => v.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = v.data().iter().find(|&&a| !(a > 0.0)) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                v.map(f64::ln)
            }
            Unary::Tanh => v.map(f64::tanh),
            Unary::Neg => v.map(|a| -a),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Unary(op, x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x).expect("relu is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x).expect("exp is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x).expect("tanh is total")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x).expect("neg is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|a| a * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Adds a constant.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|a| a + c);
        let rg = self.rg(x);
        self.push(out, Op::Offset(x), rg)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|a| a.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn check_classes(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let shape = self.value(x).shape();
        let (rows, cols) = rows_cols(shape);
        if shape.is_empty() || cols < 2 {
            return Err(Error::contract(format!("{op} needs at least 2 classes, got shape {shape:?}")));
        }
        Ok((rows, cols))
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_classes("softmax", x)?;
        let out = softmax_rows(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.check_classes("log_softmax", x)?;
        let v = self.value(x);
        let mut out = v.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|a| *a -= lse);
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.check_classes("cross_entropy", logits)?;
        if labels.len() != rows {
            return Err(Error::dim("cross_entropy", self.value(logits).shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                bound: cols,
            });
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            loss += log_sum_exp(row) - row[labels[r]];
            softmax_row(row, &mut probs[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / rows as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Cross-entropy against soft targets (rows of `targets` are
    /// distributions).
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (rows, cols) = self.check_classes("soft_cross_entropy", logits)?;
        if targets.shape() != self.value(logits).shape() {
            return Err(Error::dim("soft_cross_entropy", self.value(logits).shape(), targets.shape()));
        }
        let x = self.value(logits).data();
        let t = targets.data();
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for c in 0..cols {
                loss -= t[r * cols + c] * (row[c] - lse);
            }
            softmax_row(row, &mut probs[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / rows as f64),
            Op::SoftCrossEntropy {
                logits,
                targets: targets.clone(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over masked rows of `KL(softmax(p) || softmax(q))`.
    ///
    /// `p` is a fixed target: no gradient ever flows into it. An all-false
    /// mask yields exactly zero.
    pub fn kl_divergence(&mut self, p_logits: Var, q_logits: Var, mask: &[bool]) -> Result<Var> {
        let (sp, sq) = (self.value(p_logits).shape(), self.value(q_logits).shape());
        if sp != sq {
            return Err(Error::dim("kl_divergence", sp, sq));
        }
        let (rows, cols) = self.check_classes("kl_divergence", q_logits)?;
        if mask.len() != rows {
            return Err(Error::dim("kl_divergence", sq, &[mask.len()]));
        }
        let p = softmax_rows(self.value(p_logits)).into_data();
        let q_probs = softmax_rows(self.value(q_logits)).into_data();
        let qx = self.value(q_logits).data();
        let active = mask.iter().filter(|&&m| m).count();
        let mut total = 0.0;
        for r in (0..rows).filter(|&r| mask[r]) {
            let px = &self.value(p_logits).data()[r * cols..(r + 1) * cols];
            let (lse_p, lse_q) = (log_sum_exp(px), log_sum_exp(&qx[r * cols..(r + 1) * cols]));
            for c in 0..cols {
                let pi = p[r * cols + c];
                if pi > 0.0 {
                    total += pi * ((px[c] - lse_p) - (qx[r * cols + c] - lse_q));
                }
            }
        }
        let value = if active == 0 { 0.0 } else { total / active as f64 };
        let rg = self.rg(q_logits);
        Ok(self.push(
            Tensor::scalar(value),
            Op::KlDivergence {
                q: q_logits,
                p,
                q_probs,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat_cols of zero tensors"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::dim("slice_cols", s, &[start, len]));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            out.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let rows = s[0];
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// For each sequence, the mean of its rows in `table`; an empty sequence
    /// maps to a zero row.
    pub fn embedding_mean(&mut self, table: Var, seqs: &[Vec<usize>]) -> Result<Var> {
        let s = self.value(table).shape();
        if s.len() != 2 {
            return Err(Error::dim("embedding_mean", s, &[]));
        }
        let (vocab, dim) = (s[0], s[1]);
        if seqs.is_empty() {
            return Err(Error::contract("embedding_mean of an empty batch"));
        }
        let t = self.value(table);
        let mut out = vec![0.0; seqs.len() * dim];
        for (i, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                continue;
            }
            let inv = 1.0 / seq.len() as f64;
            let orow = &mut out[i * dim..(i + 1) * dim];
            for &tok in seq {
                if tok >= vocab {
                    return Err(Error::Index {
                        op: "embedding_mean",
                        index: tok,
                        bound: vocab,
                    });
                }
                for (o, &e) in orow.iter_mut().zip(t.row(tok)) {
                    *o += e * inv;
                }
            }
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![seqs.len(), dim], out)?,
            Op::EmbeddingMean {
                table,
                seqs: seqs.to_vec(),
            },
            rg,
        ))
    }

    /// Normalizes each row over the last dimension to zero mean and unit
    /// variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let (rows, cols) = rows_cols(v.shape());
        let mut out = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|a| *a = (*a - mean) * is);
            inv_std.push(is);
        }
        let out = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Multi-head scaled dot-product self-attention core.
    ///
    /// `q`, `k`, `v` are `[groups * tokens, width]`; rows `g*tokens..(g+1)*tokens`
    /// form one sequence. Attention never crosses groups. Returns the
    /// concatenated head outputs, same shape as `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tokens: usize, heads: usize) -> Result<Var> {
        let s = self.value(q).shape().to_vec();
        for other in [k, v] {
            if self.value(other).shape() != s.as_slice() {
                return Err(Error::dim("attention", &s, self.value(other).shape()));
            }
        }
        if s.len() != 2 || tokens == 0 || s[0] % tokens != 0 || heads == 0 || s[1] % heads != 0 {
            return Err(Error::dim("attention", &s, &[tokens, heads]));
        }
        let (n, width) = (s[0], s[1]);
        let groups = n / tokens;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; groups * heads * tokens * tokens];
        let mut out = vec![0.0; n * width];
        let mut scores = vec![0.0; tokens];
        for g in 0..groups {
            for h in 0..heads {
                let base = (g * heads + h) * tokens * tokens;
                for t in 0..tokens {
                    let qi = (g * tokens + t) * width + h * dh;
                    for (u, sc) in scores.iter_mut().enumerate() {
                        let ki = (g * tokens + u) * width + h * dh;
                        *sc = (0..dh).map(|c| qd[qi + c] * kd[ki + c]).sum::<f64>() * scale;
                    }
                    let prow = &mut probs[base + t * tokens..base + (t + 1) * tokens];
                    softmax_row(&scores, prow);
                    let oi = (g * tokens + t) * width + h * dh;
                    for (u, &pu) in prow.iter().enumerate() {
                        let vi = (g * tokens + u) * width + h * dh;
                        for c in 0..dh {
                            out[oi + c] += pu * vd[vi + c];
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::Attention {
                q,
                k,
                v,
                tokens,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Reparameterized draw `mu + exp(log_var / 2) * eps`, `eps ~ N(0, I)`.
    /// `log_var` is clamped to `[-30, 30]` first.
    pub fn gaussian_sample<R: Rng + ?Sized>(&mut self, mu: Var, log_var: Var, rng: &mut R) -> Result<Var> {
        let shape = self.value(mu).shape().to_vec();
        if self.value(log_var).shape() != shape.as_slice() {
            return Err(Error::dim("gaussian_sample", &shape, self.value(log_var).shape()));
        }
        let n = self.value(mu).numel();
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let eps = self.constant(Tensor::new(shape, eps)?);
        let lv = self.clamp(log_var, -30.0, 30.0);
        let half = self.scale(lv, 0.5);
        let std = self.exp(half);
        let noise = self.mul(std, eps)?;
        self.add(mu, noise)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.param_vars,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let bd = bv.data();
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let ad = av.data();
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = ad[r * k + p];
                            if a_rp == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, &x) in drow.iter_mut().zip(grow) {
                                *d += a_rp * x;
                            }
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Binary(op, a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (ad.len(), bd.len());
                if self.rg(*a) {
                    let mut da = vec![0.0; na];
                    for (idx, &gi) in g.iter().enumerate() {
                        da[idx % na] += match op {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * bd[idx % nb],
                        };
                    }
                    accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; nb];
                    for (idx, &gi) in g.iter().enumerate() {
                        db[idx % nb] += match op {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * ad[idx % na],
                        };
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Unary(op, x) => {
                if self.rg(*x) {
                    let xd = self.value(*x).data();
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gi)| match op {
                            Unary::Relu => {
                                if xd[j] > 0.0 {
                                    gi
                                } else {
                                    0.0
                                }
                            }
                            Unary::Exp => gi * out[j],
                            Unary::Log => gi / xd[j],
                            Unary::Tanh => gi * (1.0 - out[j] * out[j]),
                            Unary::Neg => -gi,
                        })
                        .collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    accumulate(grads, *x, g.iter().map(|gi| gi * c).collect());
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if self.rg(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.rg(*x) {
                    let xd = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xd)
                        .map(|(&gi, &a)| if a >= *lo && a <= *hi { gi } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).numel();
                    accumulate(grads, *x, vec![g[0] / n as f64; n]);
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let (rows, cols) = rows_cols(node.value.shape());
                    let mut dx = vec![0.0; out.len()];
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let (y, gr) = (&out[span.clone()], &g[span.clone()]);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (d, (&yi, &gi)) in dx[span].iter_mut().zip(y.iter().zip(gr)) {
                            *d = yi * (gi - dot);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::LogSoftmax(x) => {
                if self.rg(*x) {
                    let (rows, cols) = rows_cols(node.value.shape());
                    let mut dx = vec![0.0; out.len()];
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let gsum: f64 = g[span.clone()].iter().sum();
                        for j in span {
                            dx[j] = g[j] - out[j].exp() * gsum;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.rg(*logits) {
                    let rows = labels.len();
                    let cols = probs.len() / rows;
                    let s = g[0] / rows as f64;
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * s).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        dx[r * cols + l] -= s;
                    }
                    accumulate(grads, *logits, dx);
                }
            }
            Op::SoftCrossEntropy { logits, targets, probs } => {
                if self.rg(*logits) {
                    let (rows, cols) = rows_cols(targets.shape());
                    let s = g[0] / rows as f64;
                    let t = targets.data();
                    let mut dx = vec![0.0; probs.len()];
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let tsum: f64 = t[span.clone()].iter().sum();
                        for j in span {
                            dx[j] = s * (probs[j] * tsum - t[j]);
                        }
                    }
                    accumulate(grads, *logits, dx);
                }
            }
            Op::KlDivergence { q, p, q_probs, mask } => {
                if self.rg(*q) {
                    let rows = mask.len();
                    let cols = p.len() / rows;
                    let active = mask.iter().filter(|&&m| m).count();
                    let mut dq = vec![0.0; p.len()];
                    if active > 0 {
                        let s = g[0] / active as f64;
                        for r in (0..rows).filter(|&r| mask[r]) {
                            let span = r * cols..(r + 1) * cols;
                            let psum: f64 = p[span.clone()].iter().sum();
                            for j in span {
                                dq[j] = s * (q_probs[j] * psum - p[j]);
                            }
                        }
                    }
                    accumulate(grads, *q, dq);
                }
            }
            Op::ConcatCols(xs) => {
                let rows = node.value.rows();
                let total = node.value.row_len();
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).shape()[1];
                    if self.rg(x) {
                        let mut dx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, x, dx);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let xs = self.value(*x).shape();
                    let (rows, cols) = (xs[0], xs[1]);
                    let len = node.value.shape()[1];
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::EmbeddingMean { table, seqs } => {
                if self.rg(*table) {
                    let ts = self.value(*table).shape();
                    let dim = ts[1];
                    let mut dt = vec![0.0; ts[0] * dim];
                    for (i, seq) in seqs.iter().enumerate() {
                        if seq.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / seq.len() as f64;
                        let grow = &g[i * dim..(i + 1) * dim];
                        for &tok in seq {
                            for (d, &gi) in dt[tok * dim..(tok + 1) * dim].iter_mut().zip(grow) {
                                *d += gi * inv;
                            }
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if self.rg(*x) {
                    let (rows, cols) = rows_cols(node.value.shape());
                    let mut dx = vec![0.0; out.len()];
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let (y, gr) = (&out[span.clone()], &g[span.clone()]);
                        let gmean = gr.iter().sum::<f64>() / cols as f64;
                        let gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for (j, d) in dx[span].iter_mut().enumerate() {
                            *d = inv_std[r] * (gr[j] - gmean - y[j] * gy);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                tokens,
                heads,
                probs,
            } => {
                let (tokens, heads) = (*tokens, *heads);
                let s = node.value.shape();
                let (n, width) = (s[0], s[1]);
                let groups = n / tokens;
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; n * width];
                let mut dk = vec![0.0; n * width];
                let mut dv = vec![0.0; n * width];
                let mut dp = vec![0.0; tokens];
                for gidx in 0..groups {
                    for h in 0..heads {
                        let base = (gidx * heads + h) * tokens * tokens;
                        let at = |t: usize| (gidx * tokens + t) * width + h * dh;
                        for t in 0..tokens {
                            let prow = &probs[base + t * tokens..base + (t + 1) * tokens];
                            let go = at(t);
                            for (u, d) in dp.iter_mut().enumerate() {
                                let vi = at(u);
                                *d = (0..dh).map(|c| g[go + c] * vd[vi + c]).sum();
                                for c in 0..dh {
                                    dv[vi + c] += prow[u] * g[go + c];
                                }
                            }
                            let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qi = at(t);
                            for u in 0..tokens {
                                let ds = prow[u] * (dp[u] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let ki = at(u);
                                for c in 0..dh {
                                    dq[qi + c] += ds * kd[ki + c];
                                    dk[ki + c] += ds * qd[qi + c];
                                }
                            }
                        }
                    }
                }
                if self.rg(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.rg(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.rg(*v) {
                    accumulate(grads, *v, dv);
                }
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to any gradient-tracking node the
    /// loss depends on.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Adds gradients into the given parameters. Parameters that were loaded
    /// on the tape but unreached by the loss receive zeros; parameters never
    /// loaded are left alone.
    pub fn accumulate_into<'a, I>(&self, params: I)
    where
        I: IntoIterator<Item = &'a mut Parameter>,
    {
        for p in params {
            let Some(&v) = self.params.get(&p.id()) else { continue };
            let grad = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(g) = &self.grads[v.0] {
                for (a, b) in grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
}
