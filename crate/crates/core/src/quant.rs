//! Affine low-bit quantization.
//!
//! A real value `v` maps to the integer code `clip(round(v / s) + z, q_min, q_max)`
//! and back to `s * (code - z)`. Rounding is half-to-even everywhere so results
//! do not depend on the platform. Scales are rounded to `f32` precision when they
//! are computed, which makes the on-disk `f32` scale lossless; all other
//! arithmetic happens in `f64`.
//!
//! Weights are quantized group-wise along the input (column) axis of an
//! `[out × in]` matrix; activations per token row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerGroupWeight,
    PerChannelWeight,
    PerTokenActivation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    /// Contiguous group length along the input axis; 0 means one group per row.
    pub group_size: usize,
    pub scheme: Scheme,
    pub granularity: Granularity,
}

impl QuantSpec {
    pub fn new(bits: u8, group_size: usize, scheme: Scheme, granularity: Granularity) -> Result<Self> {
        let spec = Self { bits, group_size, scheme, granularity };
        spec.validate()?;
        Ok(spec)
    }

    /// Group-wise weight quantization, e.g. `grouped(3, 128, Symmetric)` is W3G128.
    pub fn grouped(bits: u8, group_size: usize, scheme: Scheme) -> Result<Self> {
        Self::new(bits, group_size, scheme, Granularity::PerGroupWeight)
    }

    pub fn per_channel(bits: u8, scheme: Scheme) -> Result<Self> {
        Self::new(bits, 0, scheme, Granularity::PerChannelWeight)
    }

    pub fn per_token(bits: u8) -> Result<Self> {
        Self::new(bits, 0, Scheme::Asymmetric, Granularity::PerTokenActivation)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::config(format!("bits must lie in [2, 8], got {}", self.bits)));
        }
        Ok(())
    }

    /// Integer code range `[q_min, q_max]`.
    pub fn code_range(&self) -> (i32, i32) {
        let n = self.bits as u32;
        match self.scheme {
            Scheme::Symmetric => (-(1 << (n - 1)), (1 << (n - 1)) - 1),
            Scheme::Asymmetric => (0, (1 << n) - 1),
        }
    }

    /// Group length for a row of `cols` weights; errors if it does not tile the row.
    pub fn group_len(&self, cols: usize) -> Result<usize> {
        let g = match self.granularity {
            Granularity::PerChannelWeight => cols,
            Granularity::PerGroupWeight if self.group_size == 0 => cols,
            Granularity::PerGroupWeight => self.group_size,
            Granularity::PerTokenActivation => {
                return Err(Error::config("per-token granularity does not apply to weights"))
            }
        };
        if cols == 0 || g == 0 || cols % g != 0 {
            return Err(Error::config(format!(
                "group size {g} does not divide the input dimension {cols}"
            )));
        }
        Ok(g)
    }

    pub fn groups_per_row(&self, cols: usize) -> Result<usize> {
        Ok(cols / self.group_len(cols)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero: i32,
    pub q_min: i32,
    pub q_max: i32,
}

impl QuantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::integrity(format!("scale must be positive, got {}", self.scale)));
        }
        if self.q_min >= self.q_max {
            return Err(Error::integrity(format!("empty code range [{}, {}]", self.q_min, self.q_max)));
        }
        if self.zero < self.q_min || self.zero > self.q_max {
            return Err(Error::integrity(format!(
                "zero point {} outside [{}, {}]",
                self.zero, self.q_min, self.q_max
            )));
        }
        Ok(())
    }

    /// Code before clipping; `None` for non-finite input.
    #[inline]
    pub fn raw_code(&self, v: f64) -> Option<f64> {
        if !v.is_finite() {
            return None;
        }
        Some((v / self.scale).round_ties_even() + self.zero as f64)
    }

    #[inline]
    pub fn code(&self, v: f64) -> Option<i32> {
        self.raw_code(v).map(|c| c.clamp(self.q_min as f64, self.q_max as f64) as i32)
    }

    #[inline]
    pub fn value(&self, code: i32) -> f64 {
        self.scale * (code - self.zero) as f64
    }

    /// Whether the pre-clip code of `v` falls inside the code range.
    #[inline]
    pub fn in_range(&self, v: f64) -> bool {
        match self.raw_code(v) {
            Some(c) => c >= self.q_min as f64 && c <= self.q_max as f64,
            None => false,
        }
    }
}

fn f32_scale(raw: f64) -> f64 {
    let s = raw as f32;
    if s > 0.0 && s.is_finite() {
        s as f64
    } else {
        f32::MIN_POSITIVE as f64
    }
}

/// Scale and zero point for one group of values.
///
/// The asymmetric range is widened to include 0, so the zero point always lies
/// inside `[0, 2^N - 1]`. A group whose range collapses (all zeros, or all
/// equal under the asymmetric scheme) gets scale 1.0 and the zero point that
/// reproduces the constant when it is an in-range integer.
pub fn compute_params(values: &[f64], spec: &QuantSpec) -> Result<QuantParams> {
    spec.validate()?;
    if values.is_empty() {
        return Err(Error::domain("cannot compute quantization parameters of an empty group"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::domain(format!("non-finite value {v} in quantization group")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let (q_min, q_max) = spec.code_range();
    let params = match spec.scheme {
        Scheme::Symmetric => {
            let amax = lo.abs().max(hi.abs());
            let scale = if amax == 0.0 { 1.0 } else { f32_scale(amax / q_max as f64) };
            QuantParams { scale, zero: 0, q_min, q_max }
        }
        Scheme::Asymmetric => {
            if hi == lo {
                let zero = (-lo).round_ties_even().clamp(q_min as f64, q_max as f64) as i32;
                QuantParams { scale: 1.0, zero, q_min, q_max }
            } else {
                let lo0 = lo.min(0.0);
                let hi0 = hi.max(0.0);
                let scale = f32_scale((hi0 - lo0) / q_max as f64);
                let zero = (-lo0 / scale).round_ties_even().clamp(q_min as f64, q_max as f64) as i32;
                QuantParams { scale, zero, q_min, q_max }
            }
        }
    };
    Ok(params)
}

pub fn quantize(values: &[f64], params: &QuantParams) -> Result<Vec<i32>> {
    values
        .iter()
        .map(|&v| params.code(v).ok_or_else(|| Error::domain(format!("cannot quantize non-finite value {v}"))))
        .collect()
}

pub fn dequantize(codes: &[i32], params: &QuantParams) -> Result<Vec<f64>> {
    codes
        .iter()
        .map(|&c| {
            if c < params.q_min || c > params.q_max {
                Err(Error::integrity(format!(
                    "code {c} outside [{}, {}]",
                    params.q_min, params.q_max
                )))
            } else {
                Ok(params.value(c))
            }
        })
        .collect()
}

/// Integer codes of a weight matrix plus one parameter set per group.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    /// `[out, in]`
    pub shape: [usize; 2],
    /// Row-major codes; `i16` covers every supported range.
    pub codes: Vec<i16>,
    /// Row-major over `(row, group)`.
    pub params: Vec<QuantParams>,
    pub spec: QuantSpec,
}

impl QuantizedTensor {
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn group_len(&self) -> usize {
        // validated at construction
        self.spec.group_len(self.shape[1]).unwrap_or(self.shape[1])
    }

    pub fn groups_per_row(&self) -> usize {
        self.shape[1] / self.group_len()
    }

    /// Checks the group count and that every code sits in its group's range.
    pub fn validate(&self) -> Result<()> {
        let [rows, cols] = self.shape;
        let g = self.spec.group_len(cols)?;
        if self.codes.len() != rows * cols {
            return Err(Error::integrity("code count does not match shape"));
        }
        if self.params.len() != rows * (cols / g) {
            return Err(Error::integrity(format!(
                "expected {} parameter groups, found {}",
                rows * (cols / g),
                self.params.len()
            )));
        }
        for (i, &c) in self.codes.iter().enumerate() {
            let p = &self.params[(i / cols) * (cols / g) + (i % cols) / g];
            if (c as i32) < p.q_min || (c as i32) > p.q_max {
                return Err(Error::integrity(format!("code {c} at index {i} out of range")));
            }
        }
        Ok(())
    }

    pub fn dequantize(&self) -> Matrix {
        let [rows, cols] = self.shape;
        let g = self.group_len();
        let gpr = cols / g;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let p = &self.params[r * gpr + c / g];
                data.push(p.value(self.codes[r * cols + c] as i32));
            }
        }
        Matrix { rows, cols, data }
    }
}

/// Group-wise quantization of an `[out × in]` weight matrix. Applied to raw
/// weights this is round-to-nearest (RTN).
pub fn quantize_grouped(w: &Matrix, spec: &QuantSpec) -> Result<QuantizedTensor> {
    spec.validate()?;
    let g = spec.group_len(w.cols)?;
    let gpr = w.cols / g;
    let mut codes = Vec::with_capacity(w.data.len());
    let mut params = Vec::with_capacity(w.rows * gpr);
    for r in 0..w.rows {
        let row = w.row(r);
        for group in row.chunks_exact(g) {
            let p = compute_params(group, spec)?;
            for &v in group {
                let c = p.code(v).ok_or_else(|| Error::domain("non-finite weight"))?;
                codes.push(c as i16);
            }
            params.push(p);
        }
    }
    Ok(QuantizedTensor { shape: [w.rows, w.cols], codes, params, spec: *spec })
}

/// Quantize-dequantize in one pass, returning `Ŵ` and the in-range mask of
/// the pre-clip codes. `params` overrides the per-group parameters when given.
pub fn fake_quantize(
    w: &Matrix,
    spec: &QuantSpec,
    params: Option<&[QuantParams]>,
) -> Result<(Vec<f64>, Vec<bool>, Vec<QuantParams>)> {
    let g = spec.group_len(w.cols)?;
    let gpr = w.cols / g;
    let owned;
    let params = match params {
        Some(p) => {
            if p.len() != w.rows * gpr {
                return Err(Error::config(format!(
                    "expected {} frozen parameter groups, got {}",
                    w.rows * gpr,
                    p.len()
                )));
            }
            p
        }
        None => {
            let mut ps = Vec::with_capacity(w.rows * gpr);
            for r in 0..w.rows {
                for group in w.row(r).chunks_exact(g) {
                    ps.push(compute_params(group, spec)?);
                }
            }
            owned = ps;
            &owned
        }
    };
    let mut out = Vec::with_capacity(w.data.len());
    let mut mask = Vec::with_capacity(w.data.len());
    for (i, &v) in w.data.iter().enumerate() {
        let p = &params[(i / w.cols) * gpr + (i % w.cols) / g];
        let raw = p.raw_code(v).ok_or_else(|| Error::domain("non-finite weight in fake quantization"))?;
        let inside = raw >= p.q_min as f64 && raw <= p.q_max as f64;
        let code = raw.clamp(p.q_min as f64, p.q_max as f64) as i32;
        out.push(p.value(code));
        mask.push(inside);
    }
    Ok((out, mask, params.to_vec()))
}

/// Per-token asymmetric activation quantization: one parameter set per row.
pub fn quantize_per_token(x: &Matrix, bits: u8) -> Result<(Vec<i32>, Vec<QuantParams>)> {
    let spec = QuantSpec::per_token(bits)?;
    let mut codes = Vec::with_capacity(x.data.len());
    let mut params = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let p = compute_params(x.row(r), &spec)?;
        codes.extend(quantize(x.row(r), &p)?);
        params.push(p);
    }
    Ok((codes, params))
}
