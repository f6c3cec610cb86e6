//! A tiny decoder-only transformer with fake-quantizable linear layers.
//!
//! Blocks are pre-norm: `x += attn(rms(x))`, `x += down(silu(up(rms(x))))`.
//! Positions use a learned absolute table. The token embedding, the position
//! table, the output head, and normalization gains are never quantized.
//!
//! Two forward paths exist: [`TinyDecoder::forward`] records on a [`Tape`]
//! for training, and the tape-free path behind [`InferenceWeights`] drives
//! sampling (with a key/value cache) and calibration.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{FakeQuantConfig, FakeQuantMode, Tape, Tensor};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef, Matrix};
use crate::packing::{Checkpoint, TensorData};
use crate::quant::{fake_quantize, quantize_grouped, QuantParams, QuantSpec, QuantizedTensor};
use crate::taskgen::EOS;

const NORM_EPS: f64 = 1e-5;
const PARAMS_PER_LAYER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSettings {
    pub spec: QuantSpec,
    #[serde(default)]
    pub mode: FakeQuantMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantSettings>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 40, d_model: 128, n_layers: 4, n_heads: 4, d_ff: 256, max_seq_len: 128, quant: None }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if let Some(q) = &self.quant {
            q.spec.validate()?;
            q.spec.group_len(self.d_model)?;
            q.spec.group_len(self.d_ff)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { temperature: 0.6, top_p: 0.95, max_new_tokens: 64, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("sampler temperature must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("top_p must lie in (0, 1]"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyDecoder {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    /// Group parameters per quantizable layer for [`FakeQuantMode::Frozen`].
    pub frozen: BTreeMap<String, Vec<QuantParams>>,
}

/// Generated continuation with per-token statistics of the sampling policy
/// `softmax(logits / temperature)`, taken before nucleus truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub ids: Vec<u32>,
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Effective (possibly fake-quantized) weights for tape-free forwards.
pub struct InferenceWeights {
    data: Vec<Vec<f64>>,
}

const LAYER_SLOTS: [&str; 8] = ["attn_norm", "attn.q", "attn.k", "attn.v", "attn.o", "mlp_norm", "mlp.up", "mlp.down"];
const QUANTIZABLE_SLOTS: [usize; 6] = [1, 2, 3, 4, 6, 7];

impl TinyDecoder {
    /// Randomly initialized model; deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, f, t, l) = (config.vocab_size, config.d_model, config.d_ff, config.max_seq_len, config.n_layers);
        let residual_scale = 1.0 / ((2 * l) as f64).sqrt();
        let mut params = Vec::new();
        let mut normal = |name: String, shape: Vec<usize>, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            Param { name, shape, data }
        };
        params.push(normal("embed".into(), vec![v, d], 0.1));
        params.push(normal("pos_embed".into(), vec![t, d], 0.1));
        let ones = |name: String, n: usize| Param { name, shape: vec![n], data: vec![1.0; n] };
        for li in 0..l {
            let p = |s: &str| format!("layers.{li}.{s}");
            let lin = 1.0 / (d as f64).sqrt();
            params.push(ones(p("attn_norm"), d));
            params.push(normal(p("attn.q"), vec![d, d], lin));
            params.push(normal(p("attn.k"), vec![d, d], lin));
            params.push(normal(p("attn.v"), vec![d, d], lin));
            params.push(normal(p("attn.o"), vec![d, d], lin * residual_scale));
            params.push(ones(p("mlp_norm"), d));
            params.push(normal(p("mlp.up"), vec![f, d], lin));
            params.push(normal(p("mlp.down"), vec![d, f], residual_scale / (f as f64).sqrt()));
        }
        params.push(ones("final_norm".into(), d));
        params.push(normal("head".into(), vec![v, d], 1.0 / (d as f64).sqrt()));
        Ok(Self { config, params, frozen: BTreeMap::new() })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    fn layer_index(&self, layer: usize, slot: usize) -> usize {
        2 + layer * PARAMS_PER_LAYER + slot
    }

    fn head_index(&self) -> usize {
        2 + self.config.n_layers * PARAMS_PER_LAYER + 1
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::domain(format!("unknown parameter '{name}'")))
    }

    /// Every attention projection and MLP linear, in block order.
    pub fn quantizable_layers(&self) -> Vec<String> {
        (0..self.config.n_layers)
            .flat_map(|l| QUANTIZABLE_SLOTS.iter().map(move |&s| format!("layers.{l}.{}", LAYER_SLOTS[s])))
            .collect()
    }

    pub fn is_quantizable(&self, index: usize) -> bool {
        index >= 2
            && index < self.head_index() - 1
            && QUANTIZABLE_SLOTS.contains(&((index - 2) % PARAMS_PER_LAYER))
    }

    pub fn weight_shape(&self, name: &str) -> Result<(usize, usize)> {
        let p = &self.params[self.param_index(name)?];
        match p.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::domain(format!("parameter '{name}' is not a matrix"))),
        }
    }

    pub fn weight(&self, name: &str) -> Result<Matrix> {
        let (rows, cols) = self.weight_shape(name)?;
        Ok(Matrix { rows, cols, data: self.params[self.param_index(name)?].data.clone() })
    }

    pub fn set_weight(&mut self, name: &str, w: &Matrix) -> Result<()> {
        let (rows, cols) = self.weight_shape(name)?;
        if (rows, cols) != (w.rows, w.cols) {
            return Err(Error::domain(format!("weight '{name}' expects {rows}x{cols}")));
        }
        let i = self.param_index(name)?;
        self.params[i].data.copy_from_slice(&w.data);
        Ok(())
    }

    /// Switches fake quantization on (or off with `None`).
    pub fn set_quant(&mut self, quant: Option<QuantSettings>) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.quant = quant;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    fn fake_quant_config(&self, name: &str) -> Result<Option<FakeQuantConfig>> {
        let Some(q) = &self.config.quant else { return Ok(None) };
        Ok(Some(match q.mode {
            FakeQuantMode::DynamicMinmax => FakeQuantConfig::dynamic(q.spec),
            FakeQuantMode::Frozen => {
                let params = self
                    .frozen
                    .get(name)
                    .ok_or_else(|| Error::config(format!("no frozen quantization parameters for '{name}'")))?;
                FakeQuantConfig::frozen(q.spec, params.clone())
            }
        }))
    }

    fn check_tokens(&self, ids: &[u32], seq: usize) -> Result<()> {
        if seq > self.config.max_seq_len {
            return Err(Error::domain(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::domain(format!("token id {bad} outside vocabulary {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Records the forward pass for `batch` sequences of length `seq`
    /// (row-major `inputs`). Returns `[batch, seq, vocab]` logits and the
    /// parameter tensors, which are leaves when `trainable`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        inputs: &[u32],
        batch: usize,
        seq: usize,
        trainable: bool,
    ) -> Result<(Tensor<'t>, Vec<Tensor<'t>>)> {
        if inputs.len() != batch * seq || seq == 0 {
            return Err(Error::domain("forward: inputs must hold batch * seq > 0 tokens"));
        }
        self.check_tokens(inputs, seq)?;
        let cfg = &self.config;
        let mut handles = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = if trainable { tape.leaf(&p.shape, p.data.clone())? } else { tape.constant(&p.shape, p.data.clone())? };
            handles.push(t);
        }
        let weight = |idx: usize| -> Result<Tensor<'t>> {
            match self.fake_quant_config(&self.params[idx].name)? {
                Some(fq) => handles[idx].fake_quant(&fq),
                None => Ok(handles[idx]),
            }
        };
        let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let mut x = handles[0].gather_rows(&ids)?.add(&handles[1].gather_rows(&positions)?)?;
        for l in 0..cfg.n_layers {
            let idx = |s: usize| self.layer_index(l, s);
            let h = x.rms_norm(&handles[idx(0)], NORM_EPS)?;
            let q = h.matmul_t(&weight(idx(1))?)?;
            let k = h.matmul_t(&weight(idx(2))?)?;
            let v = h.matmul_t(&weight(idx(3))?)?;
            let att = q.causal_attention(&k, &v, cfg.n_heads, batch, seq)?;
            x = x.add(&att.matmul_t(&weight(idx(4))?)?)?;
            let h = x.rms_norm(&handles[idx(5)], NORM_EPS)?;
            let u = h.matmul_t(&weight(idx(6))?)?.silu();
            x = x.add(&u.matmul_t(&weight(idx(7))?)?)?;
        }
        let head = self.head_index();
        let xf = x.rms_norm(&handles[head - 1], NORM_EPS)?;
        let logits = xf.matmul_t(&handles[head])?.reshape(&[batch, seq, cfg.vocab_size])?;
        Ok((logits, handles))
    }

    /// Effective weights: quantizable matrices pass through fake quantization
    /// when it is configured.
    pub fn inference_weights(&self) -> Result<InferenceWeights> {
        let mut data = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let fq = if self.is_quantizable(i) { self.fake_quant_config(&p.name)? } else { None };
            match fq {
                Some(fq) => {
                    let m = Matrix { rows: p.shape[0], cols: p.shape[1], data: p.data.clone() };
                    let frozen = match fq.mode {
                        FakeQuantMode::Frozen => fq.frozen_params.as_deref(),
                        FakeQuantMode::DynamicMinmax => None,
                    };
                    data.push(fake_quantize(&m, &fq.spec, frozen)?.0);
                }
                None => data.push(p.data.clone()),
            }
        }
        Ok(InferenceWeights { data })
    }

    /// Tape-free forward of one sequence returning `[seq × vocab]` logits.
    /// `hook(layer, rows, n)` sees the `[n × in]` input of every quantizable linear.
    pub fn forward_rows(
        &self,
        w: &InferenceWeights,
        seq: &[u32],
        hook: &mut dyn FnMut(&str, &[f64], usize),
    ) -> Result<Vec<f64>> {
        self.check_tokens(seq, seq.len())?;
        let cfg = &self.config;
        let (d, f, t, hds) = (cfg.d_model, cfg.d_ff, seq.len(), cfg.n_heads);
        let dh = d / hds;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = vec![0.0; t * d];
        for (i, &tok) in seq.iter().enumerate() {
            let e = &w.data[0][tok as usize * d..][..d];
            let p = &w.data[1][i * d..][..d];
            for j in 0..d {
                x[i * d + j] = e[j] + p[j];
            }
        }
        let names = self.quantizable_layers();
        let mut h = vec![0.0; t * d];
        let (mut q, mut k, mut v, mut att) = (vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d]);
        let mut u = vec![0.0; t * f];
        let mut scores = vec![0.0; t * t];
        let mut probs = vec![0.0; t];
        for l in 0..cfg.n_layers {
            let wi = |s: usize| &w.data[self.layer_index(l, s)];
            let name = |s: usize| names[l * 6 + QUANTIZABLE_SLOTS.iter().position(|&x| x == s).unwrap()].as_str();
            rms_rows(&x, wi(0), d, &mut h);
            hook(name(1), &h, t);
            hook(name(2), &h, t);
            hook(name(3), &h, t);
            linear(&h, t, d, wi(1), d, &mut q);
            linear(&h, t, d, wi(2), d, &mut k);
            linear(&h, t, d, wi(3), d, &mut v);
            for hd in 0..hds {
                let off = hd * dh;
                gemm(t, dh, t, MatRef::new(&q[off..], d, false), MatRef::new(&k[off..], d, true), &mut scores, t, false);
                for i in 0..t {
                    softmax_scaled(&scores[i * t..i * t + i + 1], scale, &mut probs[..=i]);
                    let out = &mut att[i * d + off..i * d + off + dh];
                    out.fill(0.0);
                    for (j, &pj) in probs[..=i].iter().enumerate() {
                        let vr = &v[j * d + off..j * d + off + dh];
                        for c in 0..dh {
                            out[c] += pj * vr[c];
                        }
                    }
                }
            }
            hook(name(4), &att, t);
            linear_acc(&att, t, d, wi(4), d, &mut x);
            rms_rows(&x, wi(5), d, &mut h);
            hook(name(6), &h, t);
            linear(&h, t, d, wi(6), f, &mut u);
            u.iter_mut().for_each(|z| *z /= 1.0 + (-*z).exp());
            hook(name(7), &u, t);
            linear_acc(&u, t, f, wi(7), d, &mut x);
        }
        let head = self.head_index();
        rms_rows(&x, &w.data[head - 1], d, &mut h);
        let mut logits = vec![0.0; t * cfg.vocab_size];
        linear(&h, t, d, &w.data[head], cfg.vocab_size, &mut logits);
        Ok(logits)
    }

    /// Nucleus sampling of one continuation.
    pub fn sample(&self, prompt: &[u32], sampler: &SamplerConfig) -> Result<Sample> {
        let w = self.inference_weights()?;
        Ok(self.sample_batch(&w, &[prompt], sampler, &[sampler.seed])?.remove(0))
    }

    /// Samples one continuation per prompt, each with its own generator seed,
    /// sharing batched matrix products across sequences.
    pub fn sample_batch(
        &self,
        w: &InferenceWeights,
        prompts: &[&[u32]],
        sampler: &SamplerConfig,
        seeds: &[u64],
    ) -> Result<Vec<Sample>> {
        sampler.validate()?;
        if seeds.len() != prompts.len() {
            return Err(Error::domain("sample_batch: one seed per prompt is required"));
        }
        let cfg = &self.config;
        for p in prompts {
            if p.is_empty() {
                return Err(Error::domain("sample: prompt must not be empty"));
            }
            self.check_tokens(p, p.len())?;
        }
        let (d, f, vsz, hds) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
        let dh = d / hds;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_seq = prompts.len();
        let mut tokens: Vec<Vec<u32>> = prompts.iter().map(|p| p.to_vec()).collect();
        let mut fed = vec![0usize; n_seq];
        let mut done = vec![false; n_seq];
        let mut out: Vec<Sample> = (0..n_seq).map(|_| Sample { ids: vec![], log_probs: vec![], entropies: vec![] }).collect();
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        // per sequence, per layer: cached keys and values, row-major [pos × d]
        let mut kc: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); cfg.n_layers]; n_seq];
        let mut vc: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); cfg.n_layers]; n_seq];
        let mut probs = vec![0.0; vsz];
        let mut att_p = vec![0.0; cfg.max_seq_len];

        loop {
            let active: Vec<usize> = (0..n_seq).filter(|&i| !done[i]).collect();
            if active.is_empty() {
                break;
            }
            let n = active.len();
            let mut x = vec![0.0; n * d];
            for (r, &s) in active.iter().enumerate() {
                let tok = tokens[s][fed[s]] as usize;
                let pos = fed[s];
                for j in 0..d {
                    x[r * d + j] = w.data[0][tok * d + j] + w.data[1][pos * d + j];
                }
            }
            let mut h = vec![0.0; n * d];
            let (mut q, mut k, mut v, mut att) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
            let mut u = vec![0.0; n * f];
            for l in 0..cfg.n_layers {
                let wi = |s: usize| &w.data[self.layer_index(l, s)];
                rms_rows(&x, wi(0), d, &mut h);
                linear(&h, n, d, wi(1), d, &mut q);
                linear(&h, n, d, wi(2), d, &mut k);
                linear(&h, n, d, wi(3), d, &mut v);
                for (r, &s) in active.iter().enumerate() {
                    kc[s][l].extend_from_slice(&k[r * d..(r + 1) * d]);
                    vc[s][l].extend_from_slice(&v[r * d..(r + 1) * d]);
                    let len = fed[s] + 1;
                    let (ks, vs) = (&kc[s][l], &vc[s][l]);
                    for hd in 0..hds {
                        let off = hd * dh;
                        let qr = &q[r * d + off..r * d + off + dh];
                        let mut sc = [0.0f64; 0].to_vec();
                        sc.resize(len, 0.0);
                        for j in 0..len {
                            let kr = &ks[j * d + off..j * d + off + dh];
                            sc[j] = qr.iter().zip(kr).map(|(a, b)| a * b).sum();
                        }
                        softmax_scaled(&sc, scale, &mut att_p[..len]);
                        let o = &mut att[r * d + off..r * d + off + dh];
                        o.fill(0.0);
                        for j in 0..len {
                            let vr = &vs[j * d + off..j * d + off + dh];
                            let pj = att_p[j];
                            for c in 0..dh {
                                o[c] += pj * vr[c];
                            }
                        }
                    }
                }
                linear_acc(&att, n, d, wi(4), d, &mut x);
                rms_rows(&x, wi(5), d, &mut h);
                linear(&h, n, d, wi(6), f, &mut u);
                u.iter_mut().for_each(|z| *z /= 1.0 + (-*z).exp());
                linear_acc(&u, n, f, wi(7), d, &mut x);
            }
            let head = self.head_index();
            rms_rows(&x, &w.data[head - 1], d, &mut h);
            let mut logits = vec![0.0; n * vsz];
            linear(&h, n, d, &w.data[head], vsz, &mut logits);

            for (r, &s) in active.iter().enumerate() {
                fed[s] += 1;
                if fed[s] < tokens[s].len() {
                    continue; // still consuming the prompt
                }
                let row = &logits[r * vsz..(r + 1) * vsz];
                let lse = softmax_scaled(row, 1.0 / sampler.temperature, &mut probs);
                let tok = nucleus_draw(&probs, sampler.top_p, &mut rngs[s]);
                let entropy = -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
                out[s].ids.push(tok as u32);
                out[s].log_probs.push(row[tok] / sampler.temperature - lse);
                out[s].entropies.push(entropy);
                tokens[s].push(tok as u32);
                if tok as u32 == EOS
                    || out[s].ids.len() >= sampler.max_new_tokens
                    || tokens[s].len() >= cfg.max_seq_len
                {
                    done[s] = true;
                }
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.meta.insert("model_config".into(), serde_json::to_value(&self.config)?);
        for p in &self.params {
            ck.push(p.name.clone(), TensorData::dense(p.shape.clone(), p.data.clone()));
        }
        for (name, params) in &self.frozen {
            let scales = params.iter().map(|p| p.scale).collect();
            let zeros = params.iter().map(|p| p.zero as f64).collect();
            ck.push(format!("frozen/{name}/scale"), TensorData::dense(vec![params.len()], scales));
            ck.push(format!("frozen/{name}/zero"), TensorData::dense(vec![params.len()], zeros));
        }
        Ok(ck)
    }

    /// Checkpoint with every quantizable layer stored as packed integer codes.
    /// Codes use the frozen parameters when present, else each group's own
    /// min-max grid; the latent weights themselves are not kept.
    pub fn to_packed_checkpoint(&self) -> Result<Checkpoint> {
        let q = self.config.quant.ok_or_else(|| Error::config("packing needs a quantized model"))?;
        let mut ck = Checkpoint::new();
        ck.meta.insert("model_config".into(), serde_json::to_value(&self.config)?);
        for (i, p) in self.params.iter().enumerate() {
            if !self.is_quantizable(i) {
                ck.push(p.name.clone(), TensorData::dense(p.shape.clone(), p.data.clone()));
                continue;
            }
            let w = Matrix { rows: p.shape[0], cols: p.shape[1], data: p.data.clone() };
            let qt = match self.frozen.get(&p.name) {
                None => quantize_grouped(&w, &q.spec)?,
                Some(params) => {
                    let g = q.spec.group_len(w.cols)?;
                    let gpr = w.cols / g;
                    if params.len() != w.rows * gpr {
                        return Err(Error::integrity(format!("frozen parameters of '{}' do not match its groups", p.name)));
                    }
                    let codes = w
                        .data
                        .iter()
                        .enumerate()
                        .map(|(k, &v)| {
                            let gp = &params[(k / w.cols) * gpr + (k % w.cols) / g];
                            gp.code(v).map(|c| c as i16).ok_or_else(|| Error::domain("non-finite weight"))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    QuantizedTensor { shape: [w.rows, w.cols], codes, params: params.clone(), spec: q.spec }
                }
            };
            ck.push(p.name.clone(), TensorData::Quantized(qt));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(
            ck.meta.get("model_config").cloned().ok_or_else(|| Error::format("checkpoint lacks model_config"))?,
        )
        .map_err(|e| Error::format(format!("bad model_config: {e}")))?;
        let mut model = TinyDecoder::new(cfg, 0)?;
        let mut packed = BTreeMap::new();
        for p in &mut model.params {
            if let Some(TensorData::Quantized(qt)) = ck.get(&p.name) {
                if qt.shape[..] != p.shape[..] {
                    return Err(Error::format(format!("tensor '{}' has shape {:?}, expected {:?}", p.name, qt.shape, p.shape)));
                }
                p.data.copy_from_slice(&qt.dequantize().data);
                packed.insert(p.name.clone(), qt.params.clone());
                continue;
            }
            let (shape, data) = ck.dense(&p.name)?;
            if shape != p.shape.as_slice() {
                return Err(Error::format(format!("tensor '{}' has shape {shape:?}, expected {:?}", p.name, p.shape)));
            }
            p.data.copy_from_slice(data);
        }
        model.frozen.append(&mut packed);
        if let Some(q) = &model.config.quant {
            let (q_min, q_max) = q.spec.code_range();
            for name in model.quantizable_layers() {
                let (Ok((_, s)), Ok((_, z))) = (ck.dense(&format!("frozen/{name}/scale")), ck.dense(&format!("frozen/{name}/zero"))) else {
                    continue;
                };
                let params = s
                    .iter()
                    .zip(z)
                    .map(|(&scale, &zero)| QuantParams { scale, zero: zero as i32, q_min, q_max })
                    .collect();
                model.frozen.insert(name, params);
            }
        }
        Ok(model)
    }
}

fn rms_rows(x: &[f64], gain: &[f64], d: usize, out: &mut [f64]) {
    for (src, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = src.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        for ((o, &s), &g) in dst.iter_mut().zip(src).zip(gain) {
            *o = s * r * g;
        }
    }
}

/// `out[n × m] = x[n × k] · wᵀ` for `w` stored `[m × k]`.
fn linear(x: &[f64], n: usize, k: usize, w: &[f64], m: usize, out: &mut [f64]) {
    gemm(n, k, m, MatRef::new(x, k, false), MatRef::new(w, k, true), out, m, false);
}

fn linear_acc(x: &[f64], n: usize, k: usize, w: &[f64], m: usize, out: &mut [f64]) {
    gemm(n, k, m, MatRef::new(x, k, false), MatRef::new(w, k, true), out, m, true);
}

fn softmax_scaled(src: &[f64], scale: f64, dst: &mut [f64]) -> f64 {
    let m = src.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
    let mut z = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s * scale - m).exp();
        z += *d;
    }
    for d in dst.iter_mut() {
        *d /= z;
    }
    m + z.ln()
}

/// Draws from the smallest descending-probability prefix (ties broken by
/// token id) whose mass reaches `top_p`, renormalized.
pub fn nucleus_draw(probs: &[f64], top_p: f64, rng: &mut impl Rng) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut cum = 0.0;
    let mut keep = order.len();
    for (i, &t) in order.iter().enumerate() {
        cum += probs[t];
        if cum >= top_p {
            keep = i + 1;
            break;
        }
    }
    let kept = &order[..keep];
    let mass: f64 = kept.iter().map(|&t| probs[t]).sum();
    let mut u = rng.gen::<f64>() * mass;
    for &t in kept {
        u -= probs[t];
        if u < 0.0 {
            return t;
        }
    }
    kept[keep - 1]
}
