//! Post-training quantization: round-to-nearest, Hessian-compensated GPTQ,
//! and an exhaustive search used as an optimality oracle on tiny instances.
//!
//! All solvers report the layer-wise proxy loss
//! `trace((W - Ŵ) H (W - Ŵ)ᵀ)`, summed over output rows.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef, Matrix};
use crate::model::TinyDecoder;
use crate::quant::{quantize_grouped, QuantParams, QuantSpec, QuantizedTensor};

/// Running sum of `xᵀx` over calibration token inputs of one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianAccumulator {
    pub dim: usize,
    pub h: Matrix,
    pub n_samples: usize,
}

impl HessianAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { dim, h: Matrix::zeros(dim, dim), n_samples: 0 }
    }

    /// Adds the rows of `x` (`[tokens × dim]`).
    pub fn accumulate(&mut self, x: &Matrix) -> Result<()> {
        if x.cols != self.dim {
            return Err(Error::domain(format!(
                "calibration batch has {} features, accumulator expects {}",
                x.cols, self.dim
            )));
        }
        self.accumulate_rows(&x.data, x.rows);
        Ok(())
    }

    pub(crate) fn accumulate_rows(&mut self, rows: &[f64], n: usize) {
        if n == 0 {
            return;
        }
        let d = self.dim;
        gemm(d, n, d, MatRef::new(rows, d, true), MatRef::new(rows, d, false), &mut self.h.data, d, true);
        self.n_samples += n;
    }

    pub fn merge(&mut self, other: &HessianAccumulator) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::domain("cannot merge accumulators of different dimension"));
        }
        for (a, b) in self.h.data.iter_mut().zip(&other.h.data) {
            *a += b;
        }
        self.n_samples += other.n_samples;
        Ok(())
    }

    /// `(2/n)·Σxᵀx + λI` with `λ = percdamp · mean(diag)`.
    pub fn damped_hessian(&self, percdamp: f64) -> Result<Matrix> {
        if self.n_samples == 0 {
            return Err(Error::domain("Hessian accumulator holds no samples"));
        }
        let d = self.dim;
        let scale = 2.0 / self.n_samples as f64;
        let mut h = Matrix { rows: d, cols: d, data: self.h.data.iter().map(|v| v * scale).collect() };
        for i in 0..d {
            // inputs that never fire carry no information; keep them well-posed
            if h.get(i, i) == 0.0 {
                h.set(i, i, 1.0);
            }
        }
        let mean_diag = (0..d).map(|i| h.get(i, i)).sum::<f64>() / d as f64;
        let damp = percdamp * mean_diag;
        for i in 0..d {
            h.set(i, i, h.get(i, i) + damp);
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    /// QAT starts from `Ŵ`, so its first fake-quant forward is the PTQ model.
    #[default]
    Dequantized,
    /// QAT starts from the error-compensated weights seen just before rounding.
    Compensated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GptqOptions {
    pub percdamp: f64,
    /// Process columns by descending Hessian diagonal instead of natural order.
    pub act_order: bool,
}

impl Default for GptqOptions {
    fn default() -> Self {
        Self { percdamp: 0.01, act_order: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PtqResult {
    pub quantized: QuantizedTensor,
    /// Dequantized weights `Ŵ`.
    pub latent: Matrix,
    /// Weights as they stood when each column was rounded (equals `W` for RTN).
    pub compensated: Matrix,
    pub proxy_loss: f64,
}

impl PtqResult {
    pub fn latent_for(&self, mode: LatentMode) -> &Matrix {
        match mode {
            LatentMode::Dequantized => &self.latent,
            LatentMode::Compensated => &self.compensated,
        }
    }
}

/// `Σ_rows (w - ŵ) H (w - ŵ)ᵀ`.
pub fn proxy_loss(w: &Matrix, w_hat: &Matrix, h: &Matrix) -> f64 {
    let d = w.cols;
    let mut total = 0.0;
    let mut diff = vec![0.0; d];
    for r in 0..w.rows {
        for ((o, a), b) in diff.iter_mut().zip(w.row(r)).zip(w_hat.row(r)) {
            *o = a - b;
        }
        for i in 0..d {
            if diff[i] == 0.0 {
                continue;
            }
            let hi = h.row(i);
            let mut acc = 0.0;
            for j in 0..d {
                acc += hi[j] * diff[j];
            }
            total += diff[i] * acc;
        }
    }
    total.max(0.0)
}

fn frobenius_sq(w: &Matrix, w_hat: &Matrix) -> f64 {
    w.data.iter().zip(&w_hat.data).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Round-to-nearest. The proxy loss is taken against the identity Hessian,
/// i.e. the squared Frobenius error.
pub fn rtn(w: &Matrix, spec: &QuantSpec) -> Result<PtqResult> {
    let quantized = quantize_grouped(w, spec)?;
    let latent = quantized.dequantize();
    let proxy_loss = frobenius_sq(w, &latent);
    Ok(PtqResult { quantized, latent, compensated: w.clone(), proxy_loss })
}

fn check_finite(w: &Matrix) -> Result<()> {
    if let Some(v) = w.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::domain(format!("weight matrix contains non-finite value {v}")));
    }
    Ok(())
}

/// GPTQ with error compensation through the upper Cholesky factor of `H⁻¹`.
pub fn gptq(w: &Matrix, acc: &HessianAccumulator, spec: &QuantSpec, opts: &GptqOptions) -> Result<PtqResult> {
    if acc.dim != w.cols {
        return Err(Error::domain(format!(
            "accumulator dimension {} does not match {} input features",
            acc.dim, w.cols
        )));
    }
    let h = acc.damped_hessian(opts.percdamp)?;
    gptq_with_hessian(w, &h, spec, opts)
}

/// GPTQ on an already normalized and damped Hessian.
pub fn gptq_with_hessian(w: &Matrix, h: &Matrix, spec: &QuantSpec, opts: &GptqOptions) -> Result<PtqResult> {
    check_finite(w)?;
    spec.validate()?;
    let (rows, cols) = (w.rows, w.cols);
    if h.rows != cols || h.cols != cols {
        return Err(Error::domain("Hessian shape does not match weight columns"));
    }
    let g = spec.group_len(cols)?;
    let gpr = cols / g;

    let mut order: Vec<usize> = (0..cols).collect();
    if opts.act_order {
        order.sort_by(|&a, &b| h.get(b, b).total_cmp(&h.get(a, a)).then(a.cmp(&b)));
    }
    let hp = DMatrix::from_fn(cols, cols, |i, j| h.get(order[i], order[j]));
    let chol = Cholesky::new(hp).ok_or_else(|| singular_error(h))?;
    let hinv = chol.inverse();
    let u = Cholesky::new(hinv).ok_or_else(|| singular_error(h))?.l().transpose();

    // work matrix in processing order
    let mut work = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for (j, &c) in order.iter().enumerate() {
            work.set(r, j, w.get(r, c));
        }
    }
    let mut params: Vec<Option<QuantParams>> = vec![None; rows * gpr];
    let mut codes = vec![0i16; rows * cols];
    let mut compensated = Matrix::zeros(rows, cols);
    let mut latent = Matrix::zeros(rows, cols);
    let mut group_buf = Vec::with_capacity(g);
    let pos: Vec<usize> = {
        let mut p = vec![0; cols];
        for (j, &c) in order.iter().enumerate() {
            p[c] = j;
        }
        p
    };

    for j in 0..cols {
        let c = order[j];
        let grp = c / g;
        let d = u[(j, j)];
        for r in 0..rows {
            let slot = r * gpr + grp;
            if params[slot].is_none() {
                group_buf.clear();
                group_buf.extend((grp * g..(grp + 1) * g).map(|cc| work.get(r, pos[cc])));
                params[slot] = Some(crate::quant::compute_params(&group_buf, spec)?);
            }
            let p = params[slot].unwrap();
            let v = work.get(r, j);
            let code = p.code(v).ok_or_else(|| Error::domain("non-finite compensated weight"))?;
            let q = p.value(code);
            codes[r * cols + c] = code as i16;
            compensated.set(r, c, v);
            latent.set(r, c, q);
            let err = (v - q) / d;
            if err != 0.0 {
                let row = work.row_mut(r);
                for k in j + 1..cols {
                    row[k] -= err * u[(j, k)];
                }
            }
        }
    }
    let quantized = QuantizedTensor {
        shape: [rows, cols],
        codes,
        params: params.into_iter().map(|p| p.expect("every group visited")).collect(),
        spec: *spec,
    };
    let proxy_loss = proxy_loss(w, &latent, h);
    Ok(PtqResult { quantized, latent, compensated, proxy_loss })
}

fn singular_error(h: &Matrix) -> Error {
    let min_diag = (0..h.rows).map(|i| h.get(i, i)).fold(f64::INFINITY, f64::min);
    Error::Numeric(format!("damped Hessian is not positive definite (min diagonal {min_diag:e})"))
}

pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

/// Exhaustive minimization of the proxy loss over code assignments with the
/// group parameters fixed to the RTN parameters of `w`. Rows are independent
/// under the objective, so the search runs row by row.
pub fn brute_force(w: &Matrix, h: &Matrix, spec: &QuantSpec) -> Result<PtqResult> {
    check_finite(w)?;
    let base = quantize_grouped(w, spec)?;
    let (q_min, q_max) = spec.code_range();
    let levels = (q_max - q_min + 1) as u64;
    let space = (0..w.cols).try_fold(1u64, |acc, _| acc.checked_mul(levels).filter(|&v| v <= BRUTE_FORCE_LIMIT));
    if space.is_none() {
        return Err(Error::config(format!(
            "brute-force search over {levels}^{} assignments per row exceeds {BRUTE_FORCE_LIMIT}",
            w.cols
        )));
    }
    let g = spec.group_len(w.cols)?;
    let gpr = w.cols / g;
    let cols = w.cols;
    let mut codes = vec![0i16; w.rows * cols];
    let mut latent = Matrix::zeros(w.rows, cols);
    let single = |r: usize, row_codes: &[i32]| -> Matrix {
        let data = (0..cols).map(|c| base.params[r * gpr + c / g].value(row_codes[c])).collect();
        Matrix { rows: 1, cols, data }
    };
    for r in 0..w.rows {
        let target = Matrix { rows: 1, cols, data: w.row(r).to_vec() };
        let mut cur = vec![q_min; cols];
        let mut best = (f64::INFINITY, cur.clone());
        loop {
            let loss = proxy_loss(&target, &single(r, &cur), h);
            if loss < best.0 {
                best = (loss, cur.clone());
            }
            // odometer increment
            let mut k = 0;
            while k < cols {
                if cur[k] < q_max {
                    cur[k] += 1;
                    break;
                }
                cur[k] = q_min;
                k += 1;
            }
            if k == cols {
                break;
            }
        }
        let row = single(r, &best.1);
        latent.row_mut(r).copy_from_slice(&row.data);
        for c in 0..cols {
            codes[r * cols + c] = best.1[c] as i16;
        }
    }
    let quantized = QuantizedTensor { shape: [w.rows, cols], codes, params: base.params, spec: *spec };
    let proxy_loss = proxy_loss(w, &latent, h);
    Ok(PtqResult { quantized, latent, compensated: w.clone(), proxy_loss })
}

/// Records the input of every quantizable linear layer over `data`.
/// Keys are the layer names from [`TinyDecoder::quantizable_layers`].
pub fn calibrate_model(model: &TinyDecoder, data: &[Vec<u32>]) -> Result<BTreeMap<String, HessianAccumulator>> {
    if data.iter().all(|s| s.is_empty()) {
        return Err(Error::domain("calibration data is empty"));
    }
    let mut accs: BTreeMap<String, HessianAccumulator> = BTreeMap::new();
    for name in model.quantizable_layers() {
        let (_, cols) = model.weight_shape(&name)?;
        accs.insert(name, HessianAccumulator::new(cols));
    }
    let weights = model.inference_weights()?;
    for seq in data.iter().filter(|s| !s.is_empty()) {
        model.forward_rows(&weights, seq, &mut |layer, rows, n| {
            if let Some(acc) = accs.get_mut(layer) {
                acc.accumulate_rows(rows, n);
            }
        })?;
    }
    Ok(accs)
}
