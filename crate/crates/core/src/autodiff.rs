//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one optimization step. [`Tensor`]
//! is a copyable handle into the tape; operations append nodes, and
//! [`Tensor::backward`] walks the tape in reverse, accumulating gradients into
//! leaves created with [`Tape::leaf`]. Build a fresh tape for every step.
//!
//! Row-wise operations (softmax, normalization, losses) treat the last
//! dimension as the row and everything before it as the row count.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef, Matrix};
use crate::quant::{fake_quantize, QuantParams, QuantSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FakeQuantMode {
    /// Group parameters recomputed from the current latent weights every forward.
    #[default]
    DynamicMinmax,
    /// Group parameters fixed, typically to the PTQ grid.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FakeQuantConfig {
    pub spec: QuantSpec,
    pub mode: FakeQuantMode,
    pub frozen_params: Option<Vec<QuantParams>>,
}

impl FakeQuantConfig {
    pub fn dynamic(spec: QuantSpec) -> Self {
        Self { spec, mode: FakeQuantMode::DynamicMinmax, frozen_params: None }
    }

    pub fn frozen(spec: QuantSpec, params: Vec<QuantParams>) -> Self {
        Self { spec, mode: FakeQuantMode::Frozen, frozen_params: Some(params) }
    }

    fn params(&self) -> Result<Option<&[QuantParams]>> {
        match self.mode {
            FakeQuantMode::DynamicMinmax => Ok(None),
            FakeQuantMode::Frozen => self
                .frozen_params
                .as_deref()
                .map(Some)
                .ok_or_else(|| Error::config("frozen fake-quant mode requires frozen parameters")),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Transpose { a: usize },
    Reshape { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Exp { a: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    Softmax { a: usize },
    RmsNorm { x: usize, gain: usize, inv_rms: Vec<f64> },
    Silu { a: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, batch: usize, seq: usize, probs: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    KlDiv { p: usize, q: usize, weights: Vec<f64>, p_prob: Vec<f64>, q_prob: Vec<f64>, row_kl: Vec<f64> },
    TokenLogProb { logits: usize, targets: Vec<usize>, inv_temp: f64, probs: Vec<f64> },
    ClippedSurrogate { logp: usize, slope: Vec<f64> },
    Sum { a: usize },
    Mean { a: usize },
    FakeQuant { w: usize, mask: Vec<bool> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Exp { .. } => "exp",
            Op::GatherRows { .. } => "gather_rows",
            Op::Softmax { .. } => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Silu { .. } => "silu",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDiv { .. } => "kl_divergence",
            Op::TokenLogProb { .. } => "token_log_probs",
            Op::ClippedSurrogate { .. } => "clipped_surrogate",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::FakeQuant { .. } => "fake_quant",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(#{}, {:?})", self.id, self.shape())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, rest)) => (rest.iter().product(), c),
        None => (1, 1),
    }
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::domain(format!("{op}: shape mismatch {a:?} vs {b:?}")));
    }
    Ok(())
}

fn softmax_row(src: &[f64], scale: f64, dst: &mut [f64]) -> f64 {
    let m = src.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    let mut z = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s * scale - m).exp();
        z += *d;
    }
    for d in dst.iter_mut() {
        *d /= z;
    }
    // log-sum-exp
    m + z.ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Tensor<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, data, op, requires_grad });
        self.grads.borrow_mut().push(None);
        Tensor { tape: self, id: nodes.len() - 1 }
    }

    /// A differentiable input (parameter or probed input).
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor<'_>> {
        self.input(shape, data, true)
    }

    /// A value that never receives gradient.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor<'_>> {
        self.input(shape, data, false)
    }

    fn input(&self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor<'_>> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::domain(format!("leaf: {} values for shape {shape:?}", data.len())));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero_grad(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }
}

impl<'t> Tensor<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Name of the primitive that produced this tensor.
    pub fn op_name(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].op.name()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].data.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].data[0]
    }

    /// Accumulated gradient of a leaf after [`Tensor::backward`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grads.borrow()[self.id].clone()
    }

    fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor<'t> {
        let rg = self.requires_grad();
        self.tape.push(shape, data, op, rg)
    }

    fn binary(&self, other: &Tensor<'t>, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(shape, data, op, rg)
    }

    fn matmul_impl(&self, other: &Tensor<'t>, ta: bool, tb: bool) -> Result<Tensor<'t>> {
        let (data, shape) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 {
                return Err(Error::domain(format!("matmul: expected 2-D operands, got {:?} and {:?}", a.shape, b.shape)));
            }
            let (m, k) = if ta { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
            let (k2, n) = if tb { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
            if k != k2 {
                return Err(Error::domain(format!("matmul: inner dimensions differ ({k} vs {k2})")));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, MatRef::new(&a.data, a.shape[1], ta), MatRef::new(&b.data, b.shape[1], tb), &mut out, n, false);
            (out, vec![m, n])
        };
        Ok(self.binary(other, shape, data, Op::MatMul { a: self.id, b: other.id, ta, tb }))
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.matmul_impl(other, false, false)
    }

    /// `self · otherᵀ`, the linear-layer product for `[out × in]` weights.
    pub fn matmul_t(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        self.matmul_impl(other, false, true)
    }

    pub fn transpose(&self) -> Result<Tensor<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(Error::domain(format!("transpose: expected 2-D tensor, got {:?}", a.shape)));
            }
            let m = Matrix { rows: a.shape[0], cols: a.shape[1], data: a.data.clone() }.transpose();
            (vec![m.rows, m.cols], m.data)
        };
        Ok(self.unary(shape, data, Op::Transpose { a: self.id }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'t>> {
        let data = self.value();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::domain(format!("reshape: {} values cannot take shape {shape:?}", data.len())));
        }
        Ok(self.unary(shape.to_vec(), data, Op::Reshape { a: self.id }))
    }

    fn zip_with(&self, other: &Tensor<'t>, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        check_same(name, &a.shape, &b.shape)?;
        Ok((a.shape.clone(), a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()))
    }

    pub fn add(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        let (s, d) = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, s, d, Op::Add { a: self.id, b: other.id }))
    }

    pub fn sub(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        let (s, d) = self.zip_with(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, s, d, Op::Sub { a: self.id, b: other.id }))
    }

    pub fn mul(&self, other: &Tensor<'t>) -> Result<Tensor<'t>> {
        let (s, d) = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, s, d, Op::Mul { a: self.id, b: other.id }))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        (a.shape.clone(), a.data.iter().map(|&x| f(x)).collect())
    }

    pub fn scale(&self, c: f64) -> Tensor<'t> {
        let (s, d) = self.map(|x| x * c);
        self.unary(s, d, Op::Scale { a: self.id, c })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<'t> {
        let (s, d) = self.map(|x| x + c);
        self.unary(s, d, Op::AddScalar { a: self.id })
    }

    pub fn exp(&self) -> Tensor<'t> {
        let (s, d) = self.map(f64::exp);
        self.unary(s, d, Op::Exp { a: self.id })
    }

    pub fn silu(&self) -> Tensor<'t> {
        let (s, d) = self.map(|x| x / (1.0 + (-x).exp()));
        self.unary(s, d, Op::Silu { a: self.id })
    }

    /// Rows of a `[n × d]` table selected by `ids`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id];
            if t.shape.len() != 2 {
                return Err(Error::domain("gather_rows: table must be 2-D"));
            }
            let (n, d) = (t.shape[0], t.shape[1]);
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                if i >= n {
                    return Err(Error::domain(format!("gather_rows: index {i} out of range for {n} rows")));
                }
                out.extend_from_slice(&t.data[i * d..(i + 1) * d]);
            }
            (vec![ids.len(), d], out)
        };
        Ok(self.unary(shape, data, Op::GatherRows { table: self.id, ids: ids.to_vec() }))
    }

    pub fn softmax(&self) -> Tensor<'t> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let (_, c) = rows_cols(&a.shape);
            let mut out = vec![0.0; a.data.len()];
            for (src, dst) in a.data.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
                softmax_row(src, 1.0, dst);
            }
            (a.shape.clone(), out)
        };
        self.unary(shape, data, Op::Softmax { a: self.id })
    }

    /// `x / rms(x) ⊙ gain` per row.
    pub fn rms_norm(&self, gain: &Tensor<'t>, eps: f64) -> Result<Tensor<'t>> {
        let (shape, data, inv_rms) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g) = (&nodes[self.id], &nodes[gain.id]);
            let (_, d) = rows_cols(&x.shape);
            if g.data.len() != d {
                return Err(Error::domain(format!("rms_norm: gain has {} entries, rows have {d}", g.data.len())));
            }
            let mut out = vec![0.0; x.data.len()];
            let mut inv = Vec::with_capacity(x.data.len() / d);
            for (src, dst) in x.data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                let ms = src.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let r = 1.0 / (ms + eps).sqrt();
                for ((o, &s), &gg) in dst.iter_mut().zip(src).zip(&g.data) {
                    *o = s * r * gg;
                }
                inv.push(r);
            }
            (x.shape.clone(), out, inv)
        };
        Ok(self.binary(gain, shape, data, Op::RmsNorm { x: self.id, gain: gain.id, inv_rms }))
    }

    /// Multi-head causal self-attention over `[batch·seq × d]` projections.
    pub fn causal_attention(
        &self,
        k: &Tensor<'t>,
        v: &Tensor<'t>,
        heads: usize,
        batch: usize,
        seq: usize,
    ) -> Result<Tensor<'t>> {
        let (shape, out, probs, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (qn, kn, vn) = (&nodes[self.id], &nodes[k.id], &nodes[v.id]);
            check_same("attention", &qn.shape, &kn.shape)?;
            check_same("attention", &qn.shape, &vn.shape)?;
            let (rows, d) = rows_cols(&qn.shape);
            if rows != batch * seq || heads == 0 || d % heads != 0 {
                return Err(Error::domain(format!(
                    "attention: shape {:?} incompatible with batch {batch}, seq {seq}, heads {heads}",
                    qn.shape
                )));
            }
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut out = vec![0.0; rows * d];
            let mut probs = vec![0.0; batch * heads * seq * seq];
            let mut scores = vec![0.0; seq * seq];
            for b in 0..batch {
                for h in 0..heads {
                    let off = b * seq * d + h * dh;
                    gemm(
                        seq,
                        dh,
                        seq,
                        MatRef::new(&qn.data[off..], d, false),
                        MatRef::new(&kn.data[off..], d, true),
                        &mut scores,
                        seq,
                        false,
                    );
                    let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                    for i in 0..seq {
                        let row = &scores[i * seq..i * seq + i + 1];
                        softmax_row(row, scale, &mut p[i * seq..i * seq + i + 1]);
                    }
                    gemm(seq, seq, dh, MatRef::new(p, seq, false), MatRef::new(&vn.data[off..], d, false), &mut out[off..], d, false);
                }
            }
            (qn.shape.clone(), out, probs, qn.requires_grad || kn.requires_grad || vn.requires_grad)
        };
        let op = Op::Attention { q: self.id, k: k.id, v: v.id, heads, batch, seq, probs };
        Ok(self.tape.push(shape, out, op, rg))
    }

    /// Weighted mean token cross-entropy of `[n × V]` logits; rows with zero
    /// weight are masked out.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[f64]) -> Result<Tensor<'t>> {
        let (value, weights, probs) = {
            let nodes = self.tape.nodes.borrow();
            let l = &nodes[self.id];
            let (n, v) = rows_cols(&l.shape);
            if targets.len() != n || mask.len() != n {
                return Err(Error::domain("cross_entropy: targets/mask length must equal row count"));
            }
            let total: f64 = mask.iter().sum();
            if total <= 0.0 {
                return Err(Error::domain("cross_entropy: every position is masked"));
            }
            let mut probs = vec![0.0; n * v];
            let mut loss = 0.0;
            for i in 0..n {
                if targets[i] >= v {
                    return Err(Error::domain(format!("cross_entropy: target {} out of vocab {v}", targets[i])));
                }
                let row = &l.data[i * v..(i + 1) * v];
                let lse = softmax_row(row, 1.0, &mut probs[i * v..(i + 1) * v]);
                if mask[i] != 0.0 {
                    loss += mask[i] * (lse - row[targets[i]]);
                }
            }
            (loss / total, mask.iter().map(|m| m / total).collect::<Vec<_>>(), probs)
        };
        let op = Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), weights, probs };
        Ok(self.unary(vec![], vec![value], op))
    }

    /// Weighted mean over rows of `KL(softmax(self) ‖ softmax(q_logits))`.
    pub fn kl_divergence(&self, q_logits: &Tensor<'t>, mask: &[f64]) -> Result<Tensor<'t>> {
        let (value, weights, p_prob, q_prob, row_kl) = {
            let nodes = self.tape.nodes.borrow();
            let (p, q) = (&nodes[self.id], &nodes[q_logits.id]);
            check_same("kl_divergence", &p.shape, &q.shape)?;
            let (n, v) = rows_cols(&p.shape);
            if mask.len() != n {
                return Err(Error::domain("kl_divergence: mask length must equal row count"));
            }
            let total: f64 = mask.iter().sum();
            if total <= 0.0 {
                return Err(Error::domain("kl_divergence: every position is masked"));
            }
            let mut pp = vec![0.0; n * v];
            let mut qp = vec![0.0; n * v];
            let mut row_kl = vec![0.0; n];
            let mut loss = 0.0;
            for i in 0..n {
                let (pr, qr) = (&p.data[i * v..(i + 1) * v], &q.data[i * v..(i + 1) * v]);
                let lse_p = softmax_row(pr, 1.0, &mut pp[i * v..(i + 1) * v]);
                let lse_q = softmax_row(qr, 1.0, &mut qp[i * v..(i + 1) * v]);
                let mut kl = 0.0;
                for j in 0..v {
                    let pj = pp[i * v + j];
                    if pj > 0.0 {
                        kl += pj * ((pr[j] - lse_p) - (qr[j] - lse_q));
                    }
                }
                row_kl[i] = kl;
                loss += mask[i] * kl;
            }
            (loss / total, mask.iter().map(|m| m / total).collect::<Vec<_>>(), pp, qp, row_kl)
        };
        let op = Op::KlDiv { p: self.id, q: q_logits.id, weights, p_prob, q_prob, row_kl };
        Ok(self.binary(q_logits, vec![], vec![value], op))
    }

    /// `log softmax(logits / temperature)[target]` per row, as an `[n]` vector.
    pub fn token_log_probs(&self, targets: &[usize], temperature: f64) -> Result<Tensor<'t>> {
        if !(temperature > 0.0) {
            return Err(Error::domain("token_log_probs: temperature must be positive"));
        }
        let inv_temp = 1.0 / temperature;
        let (data, probs) = {
            let nodes = self.tape.nodes.borrow();
            let l = &nodes[self.id];
            let (n, v) = rows_cols(&l.shape);
            if targets.len() != n {
                return Err(Error::domain("token_log_probs: targets length must equal row count"));
            }
            let mut probs = vec![0.0; n * v];
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                if targets[i] >= v {
                    return Err(Error::domain(format!("token_log_probs: target {} out of vocab {v}", targets[i])));
                }
                let row = &l.data[i * v..(i + 1) * v];
                let lse = softmax_row(row, inv_temp, &mut probs[i * v..(i + 1) * v]);
                out.push(row[targets[i]] * inv_temp - lse);
            }
            (out, probs)
        };
        let n = data.len();
        let op = Op::TokenLogProb { logits: self.id, targets: targets.to_vec(), inv_temp, probs };
        Ok(self.unary(vec![n], data, op))
    }

    /// PPO-style clipped surrogate per token:
    /// `min(ρA, clip(ρ, 1-ε, 1+ε)A)` with `ρ = exp(self - old_logp)`.
    pub fn clipped_surrogate(&self, old_logp: &[f64], advantages: &[f64], eps: f64) -> Result<Tensor<'t>> {
        let (shape, data, slope) = {
            let nodes = self.tape.nodes.borrow();
            let lp = &nodes[self.id];
            if old_logp.len() != lp.data.len() || advantages.len() != lp.data.len() {
                return Err(Error::domain("clipped_surrogate: per-token inputs must match log-prob length"));
            }
            let mut out = Vec::with_capacity(lp.data.len());
            let mut slope = Vec::with_capacity(lp.data.len());
            for ((&l, &o), &a) in lp.data.iter().zip(old_logp).zip(advantages) {
                let ratio = (l - o).exp();
                let unclipped = ratio * a;
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * a;
                if unclipped <= clipped {
                    out.push(unclipped);
                    slope.push(unclipped);
                } else {
                    out.push(clipped);
                    slope.push(0.0);
                }
            }
            (lp.shape.clone(), out, slope)
        };
        Ok(self.unary(shape, data, Op::ClippedSurrogate { logp: self.id, slope }))
    }

    pub fn sum(&self) -> Tensor<'t> {
        let s = self.with_value(|d| d.iter().sum::<f64>());
        self.unary(vec![], vec![s], Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Tensor<'t> {
        let s = self.with_value(|d| d.iter().sum::<f64>() / d.len().max(1) as f64);
        self.unary(vec![], vec![s], Op::Mean { a: self.id })
    }

    /// Quantize-dequantize `[out × in]` weights; gradients pass straight
    /// through where the pre-clip code is in range and are zero where clipped.
    pub fn fake_quant(&self, cfg: &FakeQuantConfig) -> Result<Tensor<'t>> {
        let (shape, out, mask) = {
            let nodes = self.tape.nodes.borrow();
            let w = &nodes[self.id];
            if w.shape.len() != 2 {
                return Err(Error::domain("fake_quant: weights must be 2-D"));
            }
            let m = Matrix { rows: w.shape[0], cols: w.shape[1], data: w.data.clone() };
            let (out, mask, _) = fake_quantize(&m, &cfg.spec, cfg.params()?)?;
            (w.shape.clone(), out, mask)
        };
        Ok(self.unary(shape, out, Op::FakeQuant { w: self.id, mask }))
    }

    /// Back-propagates from this scalar into every reachable leaf. Repeated
    /// calls accumulate.
    pub fn backward(&self) -> Result<()> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].data.len() != 1 {
            return Err(Error::domain(format!(
                "backward: loss must be a scalar, got shape {:?}",
                nodes[self.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=self.id).map(|_| None).collect();
        grads[self.id] = Some(vec![1.0]);
        let mut persistent = self.tape.grads.borrow_mut();
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut persistent[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].data.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (an, bn) = (&nodes[*a], &nodes[*b]);
            let (m, n) = (node.shape[0], node.shape[1]);
            let k = if *ta { an.shape[0] } else { an.shape[1] };
            let (lda, ldb) = (an.shape[1], bn.shape[1]);
            let dc = MatRef::new(g, n, false);
            let dct = MatRef::new(g, n, true);
            let a_op = MatRef::new(&an.data, lda, *ta);
            let b_op = MatRef::new(&bn.data, ldb, *tb);
            let b_op_t = MatRef::new(&bn.data, ldb, !*tb);
            let a_op_t = MatRef::new(&an.data, lda, !*ta);
            if let Some(da) = slot(nodes, grads, *a) {
                if *ta {
                    gemm(k, n, m, b_op, dct, da, m, true);
                } else {
                    gemm(m, n, k, dc, b_op_t, da, k, true);
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                if *tb {
                    gemm(n, m, k, dct, a_op, db, k, true);
                } else {
                    gemm(k, m, n, a_op_t, dc, db, n, true);
                }
            }
        }
        Op::Transpose { a } => {
            let (r, c) = (node.shape[0], node.shape[1]);
            if let Some(da) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Reshape { a } | Op::AddScalar { a } => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Add { a, b } => {
            for p in [*a, *b] {
                if let Some(d) = slot(nodes, grads, p) {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    d[i] += g[i] * bv[i];
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    d[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::Exp { a } => {
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    d[i] += g[i] * node.data[i];
                }
            }
        }
        Op::Silu { a } => {
            let x = &nodes[*a].data;
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    let s = 1.0 / (1.0 + (-x[i]).exp());
                    d[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let dcols = nodes[*table].shape[1];
            if let Some(d) = slot(nodes, grads, *table) {
                for (r, &i) in ids.iter().enumerate() {
                    let src = &g[r * dcols..(r + 1) * dcols];
                    d[i * dcols..(i + 1) * dcols].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Softmax { a } => {
            let (_, c) = rows_cols(&node.shape);
            if let Some(d) = slot(nodes, grads, *a) {
                for ((dr, gr), yr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(node.data.chunks_exact(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let xv = &nodes[*x].data;
            let gv = &nodes[*gain].data;
            let d = gv.len();
            if let Some(dx) = slot(nodes, grads, *x) {
                for (i, &r) in inv_rms.iter().enumerate() {
                    let xr = &xv[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let dot: f64 = (0..d).map(|j| gr[j] * gv[j] * xr[j]).sum();
                    let coef = dot * r * r * r / d as f64;
                    for j in 0..d {
                        dx[i * d + j] += gr[j] * gv[j] * r - xr[j] * coef;
                    }
                }
            }
            if let Some(dg) = slot(nodes, grads, *gain) {
                for (i, &r) in inv_rms.iter().enumerate() {
                    for j in 0..d {
                        dg[j] += g[i * d + j] * xv[i * d + j] * r;
                    }
                }
            }
        }
        Op::Attention { q, k, v, heads, batch, seq, probs } => {
            attention_backward(nodes, grads, g, (*q, *k, *v), (*heads, *batch, *seq), probs);
        }
        Op::CrossEntropy { logits, targets, weights, probs } => {
            let v = nodes[*logits].shape.last().copied().unwrap_or(1);
            if let Some(d) = slot(nodes, grads, *logits) {
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let s = g[0] * w;
                    for j in 0..v {
                        d[i * v + j] += s * probs[i * v + j];
                    }
                    d[i * v + t] -= s;
                }
            }
        }
        Op::KlDiv { p, q, weights, p_prob, q_prob, row_kl } => {
            let v = nodes[*p].shape.last().copied().unwrap_or(1);
            let (pl, ql) = (&nodes[*p].data, &nodes[*q].data);
            if let Some(d) = slot(nodes, grads, *q) {
                for (i, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let s = g[0] * w;
                    for j in 0..v {
                        d[i * v + j] += s * (q_prob[i * v + j] - p_prob[i * v + j]);
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *p) {
                for (i, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let s = g[0] * w;
                    let r = i * v..(i + 1) * v;
                    let lse_p = log_sum_exp(&pl[r.clone()]);
                    let lse_q = log_sum_exp(&ql[r.clone()]);
                    for j in r {
                        let pj = p_prob[j];
                        if pj > 0.0 {
                            let diff = (pl[j] - lse_p) - (ql[j] - lse_q);
                            d[j] += s * pj * (diff - row_kl[i]);
                        }
                    }
                }
            }
        }
        Op::TokenLogProb { logits, targets, inv_temp, probs } => {
            let v = nodes[*logits].shape.last().copied().unwrap_or(1);
            if let Some(d) = slot(nodes, grads, *logits) {
                for (i, &t) in targets.iter().enumerate() {
                    let s = g[i] * inv_temp;
                    if s == 0.0 {
                        continue;
                    }
                    for j in 0..v {
                        d[i * v + j] -= s * probs[i * v + j];
                    }
                    d[i * v + t] += s;
                }
            }
        }
        Op::ClippedSurrogate { logp, slope } => {
            if let Some(d) = slot(nodes, grads, *logp) {
                for i in 0..g.len() {
                    d[i] += g[i] * slope[i];
                }
            }
        }
        Op::Sum { a } => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Mean { a } => {
            if let Some(d) = slot(nodes, grads, *a) {
                let s = g[0] / d.len().max(1) as f64;
                d.iter_mut().for_each(|x| *x += s);
            }
        }
        Op::FakeQuant { w, mask } => {
            if let Some(d) = slot(nodes, grads, *w) {
                for i in 0..g.len() {
                    if mask[i] {
                        d[i] += g[i];
                    }
                }
            }
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (usize, usize, usize),
    (heads, batch, seq): (usize, usize, usize),
    probs: &[f64],
) {
    let d = nodes[q].shape[nodes[q].shape.len() - 1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qv, kv, vv) = (&nodes[q].data, &nodes[k].data, &nodes[v].data);
    let n = qv.len();
    // separate buffers so q, k, v may alias the same parent
    let mut dq = vec![0.0; n];
    let mut dk = vec![0.0; n];
    let mut dv = vec![0.0; n];
    let mut dp = vec![0.0; seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq * d + h * dh;
            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
            let go = MatRef::new(&g[off..], d, false);
            // dP = dO · Vᵀ
            gemm(seq, dh, seq, go, MatRef::new(&vv[off..], d, true), &mut dp, seq, false);
            // dV += Pᵀ · dO
            gemm(seq, seq, dh, MatRef::new(p, seq, true), go, &mut dv[off..], d, true);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let dr = &mut dp[i * seq..(i + 1) * seq];
                let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                for j in 0..seq {
                    dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { 0.0 };
                }
            }
            gemm(seq, seq, dh, MatRef::new(&dp, seq, false), MatRef::new(&kv[off..], d, false), &mut dq[off..], d, true);
            gemm(seq, seq, dh, MatRef::new(&dp, seq, true), MatRef::new(&qv[off..], d, false), &mut dk[off..], d, true);
        }
    }
    for (id, buf) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(s) = slot(nodes, grads, id) {
            s.iter_mut().zip(&buf).for_each(|(x, y)| *x += y);
        }
    }
}
