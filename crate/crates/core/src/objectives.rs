//! Training objectives: masked SFT cross-entropy, forward-KL distillation,
//! GRPO with correctness rewards, and Adam with warmup + cosine decay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{Param, SamplerConfig, TinyDecoder};
use crate::taskgen::{detokenize, ANS, PAD};

/// Padded next-token batch. `mask` is 1 where the target is a response token.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<usize>,
    pub mask: Vec<f64>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Builds a batch from `(prompt, response)` pairs; sequences are padded
    /// on the right to the longest one.
    pub fn from_pairs(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        let seq = pairs.iter().map(|(p, r)| p.len() + r.len() - 1).max().unwrap();
        let batch = pairs.len();
        let mut inputs = vec![PAD; batch * seq];
        let mut targets = vec![PAD as usize; batch * seq];
        let mut mask = vec![0.0; batch * seq];
        for (b, (p, r)) in pairs.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::domain("prompt must hold at least one token"));
            }
            let full: Vec<u32> = p.iter().chain(r).copied().collect();
            for t in 0..full.len() - 1 {
                inputs[b * seq + t] = full[t];
                targets[b * seq + t] = full[t + 1] as usize;
                if t + 1 >= p.len() {
                    mask[b * seq + t] = 1.0;
                }
            }
        }
        Ok(Self { inputs, targets, mask, batch, seq })
    }

    pub fn response_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }
}

/// Mean cross-entropy over response positions.
pub fn sft_loss<'t>(model: &TinyDecoder, tape: &'t Tape, batch: &Batch) -> Result<(Tensor<'t>, Vec<Tensor<'t>>)> {
    let (logits, params) = model.forward(tape, &batch.inputs, batch.batch, batch.seq, true)?;
    Ok((logits.cross_entropy(&batch.targets, &batch.mask)?, params))
}

/// Teacher logits for a batch, computed without recording.
pub fn teacher_logits(teacher: &TinyDecoder, batch: &Batch) -> Result<Vec<f64>> {
    let w = teacher.inference_weights()?;
    let v = teacher.config.vocab_size;
    let mut out = Vec::with_capacity(batch.batch * batch.seq * v);
    for b in 0..batch.batch {
        out.extend(teacher.forward_rows(&w, &batch.inputs[b * batch.seq..(b + 1) * batch.seq], &mut |_, _, _| {})?);
    }
    Ok(out)
}

/// Mean `KL(teacher ‖ student)` over response positions, both distributions
/// softened by `temperature`; the loss is scaled by `temperature²` so gradient
/// magnitudes stay comparable across temperatures. `cached` may carry
/// precomputed [`teacher_logits`] for the batch.
pub fn kd_loss<'t>(
    student: &TinyDecoder,
    teacher: &TinyDecoder,
    tape: &'t Tape,
    batch: &Batch,
    cached: Option<&[f64]>,
    temperature: f64,
) -> Result<(Tensor<'t>, Vec<Tensor<'t>>)> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("KD temperature must be positive, got {temperature}")));
    }
    if student.config.vocab_size != teacher.config.vocab_size {
        return Err(Error::config(format!(
            "student vocab {} differs from teacher vocab {}",
            student.config.vocab_size, teacher.config.vocab_size
        )));
    }
    let (logits, params) = student.forward(tape, &batch.inputs, batch.batch, batch.seq, true)?;
    let t = match cached {
        Some(c) => c.to_vec(),
        None => teacher_logits(teacher, batch)?,
    };
    if temperature == 1.0 {
        let t = tape.constant(&logits.shape(), t)?;
        return Ok((t.kl_divergence(&logits, &batch.mask)?, params));
    }
    let t = tape.constant(&logits.shape(), t.iter().map(|v| v / temperature).collect())?;
    let kl = t.kl_divergence(&logits.scale(1.0 / temperature), &batch.mask)?;
    Ok((kl.scale(temperature * temperature), params))
}

/// 1 iff the integer after the final answer marker equals `target`.
pub fn verify_answer(ids: &[u32], target: i64) -> f64 {
    let Some(pos) = ids.iter().rposition(|&t| t == ANS) else { return 0.0 };
    let Ok(text) = detokenize(&ids[pos + 1..]) else { return 0.0 };
    let s = text.trim_start();
    let (neg, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let end = digits.find(|c: char| !c.is_ascii_digit()).unwrap_or(digits.len());
    if end == 0 {
        return 0.0;
    }
    let Ok(v) = digits[..end].parse::<i64>() else { return 0.0 };
    let v = if neg { -v } else { v };
    if v == target {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub betas: (f64, f64),
    pub global_batch: usize,
    pub grad_accum: usize,
    pub total_steps: usize,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

fn default_clip() -> f64 {
    1.0
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { peak_lr: 1e-3, warmup_steps: 180, betas: (0.9, 0.95), global_batch: 32, grad_accum: 1, total_steps: 2000, grad_clip: 1.0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(0.0 < b1 && b1 < 1.0 && 0.0 < b2 && b2 < 1.0) {
            return Err(Error::config("betas must lie in (0, 1)"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps exceeds total_steps"));
        }
        if self.total_steps == 0 || self.global_batch == 0 || self.grad_accum == 0 {
            return Err(Error::config("total_steps, global_batch and grad_accum must be positive"));
        }
        if self.global_batch % self.grad_accum != 0 {
            return Err(Error::config("global_batch must be divisible by grad_accum"));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::config("peak_lr must be positive"));
        }
        Ok(())
    }

    /// Linear warmup to the peak, then cosine decay to zero at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn micro_batch(&self) -> usize {
        self.global_batch / self.grad_accum
    }
}

/// Adam moments for a parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: usize,
}

pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(params: &[Param]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One bias-corrected update at schedule position `step` (1-based).
    /// Returns the learning rate used. Non-finite gradients reject the step.
    pub fn step(&mut self, params: &mut [Param], grads: &[Vec<f64>], cfg: &OptimizerConfig, step: usize) -> Result<f64> {
        if step > cfg.total_steps {
            return Err(Error::domain(format!("step {step} beyond total_steps {}", cfg.total_steps)));
        }
        if grads.len() != params.len() {
            return Err(Error::domain("one gradient per parameter is required"));
        }
        let mut sq = 0.0;
        for (g, p) in grads.iter().zip(params.iter()) {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in '{}' at element {i}", p.name)));
            }
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
        let lr = cfg.lr_at(step);
        let (b1, b2) = cfg.betas;
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for j in 0..p.data.len() {
                let gj = g[j] * clip;
                self.m[i][j] = b1 * self.m[i][j] + (1.0 - b1) * gj;
                self.v[i][j] = b2 * self.v[i][j] + (1.0 - b2) * gj * gj;
                let mh = self.m[i][j] / c1;
                let vh = self.v[i][j] / c2;
                p.data[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(lr)
    }
}

/// Sums leaf gradients into `acc` (allocated on first use).
pub fn accumulate_grads(acc: &mut Vec<Vec<f64>>, handles: &[Tensor<'_>]) {
    if acc.is_empty() {
        *acc = handles.iter().map(|h| h.grad().unwrap_or_else(|| vec![0.0; h.with_value(|d| d.len())])).collect();
        return;
    }
    for (a, h) in acc.iter_mut().zip(handles) {
        if let Some(g) = h.grad() {
            a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub std_eps: f64,
    pub rollout_max_len: usize,
    pub batch_prompts: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self { group_size: 8, clip_eps: 0.2, kl_coef: 0.0, std_eps: 1e-4, rollout_max_len: 128, batch_prompts: 4 }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("GRPO group_size must be at least 2"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config("clip_eps must lie in (0, 1)"));
        }
        if !(self.kl_coef >= 0.0) || !(self.std_eps >= 0.0) {
            return Err(Error::config("kl_coef and std_eps must be non-negative"));
        }
        if self.rollout_max_len == 0 || self.batch_prompts == 0 {
            return Err(Error::config("rollout_max_len and batch_prompts must be positive"));
        }
        Ok(())
    }
}

/// Group-normalized advantages `(r - mean) / (std + std_eps)` with the
/// population standard deviation; all zero for a constant group.
pub fn group_advantages(rewards: &[f64], std_eps: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; rewards.len()];
    }
    let mut adv: Vec<f64> = rewards.iter().map(|r| (r - mean) / (std + std_eps)).collect();
    // the last entry absorbs the rounding residue so the sum is exactly zero
    let n = adv.len();
    let head: f64 = adv[..n - 1].iter().sum();
    adv[n - 1] = -head;
    adv
}

/// Non-negative KL estimate `exp(d) - d - 1` with `d = log π_ref - log π_θ`.
pub fn kl_estimate(delta: f64) -> f64 {
    delta.exp() - delta - 1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Vec<u32>,
    pub responses: Vec<Vec<u32>>,
    pub log_probs: Vec<Vec<f64>>,
    pub entropies: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoMetrics {
    pub loss: f64,
    pub reward_mean: f64,
    pub mean_length: f64,
    pub entropy: f64,
    pub lr: f64,
}

/// Samples `group_size` responses per prompt and scores them. Seeds derive
/// from `seed` and the (prompt, member) index so results do not depend on
/// batching.
pub fn rollout(
    policy: &TinyDecoder,
    prompts: &[(Vec<u32>, i64)],
    cfg: &GrpoConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<RolloutGroup>> {
    let w = policy.inference_weights()?;
    let g = cfg.group_size;
    let sampler = SamplerConfig { max_new_tokens: sampler.max_new_tokens.min(cfg.rollout_max_len), ..sampler.clone() };
    let refs: Vec<&[u32]> = prompts.iter().flat_map(|(p, _)| std::iter::repeat(p.as_slice()).take(g)).collect();
    let seeds: Vec<u64> = (0..refs.len()).map(|i| derive_seed(seed, i as u64)).collect();
    let samples = policy.sample_batch(&w, &refs, &sampler, &seeds)?;
    let mut out = Vec::with_capacity(prompts.len());
    for (pi, (prompt, target)) in prompts.iter().enumerate() {
        let group = &samples[pi * g..(pi + 1) * g];
        let rewards: Vec<f64> = group.iter().map(|s| verify_answer(&s.ids, *target)).collect();
        let advantages = group_advantages(&rewards, cfg.std_eps);
        out.push(RolloutGroup {
            prompt: prompt.clone(),
            responses: group.iter().map(|s| s.ids.clone()).collect(),
            log_probs: group.iter().map(|s| s.log_probs.clone()).collect(),
            entropies: group.iter().map(|s| s.entropies.clone()).collect(),
            rewards,
            advantages,
        });
    }
    Ok(out)
}

pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One GRPO update: rollouts, clipped surrogate with optional KL penalty to
/// `reference`, one optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn grpo_step(
    policy: &mut TinyDecoder,
    reference: Option<&TinyDecoder>,
    prompts: &[(Vec<u32>, i64)],
    cfg: &GrpoConfig,
    sampler: &SamplerConfig,
    opt: &mut Adam,
    opt_cfg: &OptimizerConfig,
    step: usize,
    seed: u64,
) -> Result<GrpoMetrics> {
    cfg.validate()?;
    let groups = rollout(policy, prompts, cfg, sampler, seed)?;
    let n_resp = groups.len() * cfg.group_size;
    let mut reward_sum = 0.0;
    let mut len_sum = 0.0;
    let (mut ent_sum, mut ent_n) = (0.0, 0usize);
    for g in &groups {
        reward_sum += g.rewards.iter().sum::<f64>();
        len_sum += g.responses.iter().map(Vec::len).sum::<usize>() as f64;
        for e in &g.entropies {
            ent_sum += e.iter().sum::<f64>();
            ent_n += e.len();
        }
    }
    let mut metrics = GrpoMetrics {
        loss: 0.0,
        reward_mean: reward_sum / n_resp as f64,
        mean_length: len_sum / n_resp as f64,
        entropy: if ent_n > 0 { ent_sum / ent_n as f64 } else { 0.0 },
        lr: opt_cfg.lr_at(step),
    };

    let all_zero = groups.iter().all(|g| g.advantages.iter().all(|&a| a == 0.0));
    if all_zero && cfg.kl_coef == 0.0 {
        // the loss is identically zero; skip the forward but keep the schedule
        return Ok(metrics);
    }

    let mut pairs = Vec::with_capacity(n_resp);
    let mut old = Vec::new();
    let mut adv = Vec::new();
    for g in &groups {
        for (i, r) in g.responses.iter().enumerate() {
            pairs.push((g.prompt.clone(), r.clone()));
            old.push(g.log_probs[i].clone());
            adv.push(g.advantages[i]);
        }
    }
    let batch = Batch::from_pairs(&pairs)?;
    let (mut old_lp, mut adv_tok) = (vec![0.0; batch.mask.len()], vec![0.0; batch.mask.len()]);
    for (b, (p, _)) in pairs.iter().enumerate() {
        for (k, &lp) in old[b].iter().enumerate() {
            let pos = b * batch.seq + p.len() - 1 + k;
            old_lp[pos] = lp;
            adv_tok[pos] = adv[b];
        }
    }
    let total = batch.response_tokens() as f64;
    let weights: Vec<f64> = batch.mask.iter().map(|m| m / total).collect();

    let tape = Tape::new();
    let (logits, handles) = policy.forward(&tape, &batch.inputs, batch.batch, batch.seq, true)?;
    let logp = logits.token_log_probs(&batch.targets, sampler.temperature)?;
    let w = tape.constant(&[weights.len()], weights.clone())?;
    let surrogate = logp.clipped_surrogate(&old_lp, &adv_tok, cfg.clip_eps)?.mul(&w)?.sum();
    let mut loss = surrogate.scale(-1.0);
    if cfg.kl_coef > 0.0 {
        let reference = reference.ok_or_else(|| Error::config("kl_coef > 0 requires a reference policy"))?;
        let ref_logits = teacher_logits(reference, &batch)?;
        let rl = tape.constant(&logits.shape(), ref_logits)?;
        let ref_lp = rl.token_log_probs(&batch.targets, sampler.temperature)?;
        let delta = ref_lp.sub(&logp)?;
        let est = delta.exp().sub(&delta)?.add_scalar(-1.0).mul(&w)?.sum();
        loss = loss.add(&est.scale(cfg.kl_coef))?;
    }
    loss.backward()?;
    metrics.loss = loss.item();
    let grads: Vec<Vec<f64>> =
        handles.iter().map(|h| h.grad().unwrap_or_else(|| vec![0.0; h.with_value(|d| d.len())])).collect();
    drop(handles);
    metrics.lr = opt.step(&mut policy.params, &grads, opt_cfg, step)?;
    Ok(metrics)
}

/// Two-action, single-step bandit trained with the GRPO surrogate. Action 1
/// pays 1, action 0 pays 0. Returns `P(action 1)` before each step and after
/// the last one.
pub fn bandit_grpo(seed: u64, steps: usize, group_size: usize, lr: f64) -> Result<Vec<f64>> {
    let cfg = GrpoConfig { group_size, ..Default::default() };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![Param { name: "logits".into(), shape: vec![1, 2], data: vec![0.0, -1.0] }];
    let opt_cfg = OptimizerConfig {
        peak_lr: lr,
        warmup_steps: 0,
        betas: (0.9, 0.95),
        global_batch: group_size,
        grad_accum: 1,
        total_steps: steps,
        grad_clip: 0.0,
    };
    let mut opt = Adam::new(&theta);
    let p1 = |t: &[f64]| 1.0 / (1.0 + (t[0] - t[1]).exp());
    let mut curve = vec![p1(&theta[0].data)];
    for step in 1..=steps {
        let p = p1(&theta[0].data);
        let actions: Vec<usize> = (0..group_size).map(|_| usize::from(rng.gen::<f64>() < p)).collect();
        let rewards: Vec<f64> = actions.iter().map(|&a| a as f64).collect();
        let adv = group_advantages(&rewards, cfg.std_eps);
        let lse = (theta[0].data[0].exp() + theta[0].data[1].exp()).ln();
        let old: Vec<f64> = actions.iter().map(|&a| theta[0].data[a] - lse).collect();

        let tape = Tape::new();
        let th = tape.leaf(&[1, 2], theta[0].data.clone())?;
        let rows = th.gather_rows(&vec![0; group_size])?;
        let logp = rows.token_log_probs(&actions, 1.0)?;
        let loss = logp.clipped_surrogate(&old, &adv, cfg.clip_eps)?.mean().scale(-1.0);
        loss.backward()?;
        let g = th.grad().unwrap_or(vec![0.0; 2]);
        opt.step(&mut theta, &[g], &opt_cfg, step)?;
        curve.push(p1(&theta[0].data));
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::taskgen::tokenize;

    fn tiny() -> TinyDecoder {
        TinyDecoder::new(
            ModelConfig { vocab_size: 40, d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_seq_len: 32, quant: None },
            3,
        )
        .unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let tape = Tape::new();
        let logits = tape.constant(&[3, 40], vec![0.25; 120]).unwrap();
        let ce = logits.cross_entropy(&[1, 2, 3], &[1.0, 1.0, 1.0]).unwrap();
        assert!((ce.item() - 40f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sft_ignores_prompt_targets() {
        let m = tiny();
        let a = Batch::from_pairs(&[(vec![1, 5, 6], vec![7, 8, 2])]).unwrap();
        let mut b = a.clone();
        b.targets[0] = 9; // position 0 predicts a prompt token
        assert_eq!(b.mask[0], 0.0);
        let tape = Tape::new();
        let la = sft_loss(&m, &tape, &a).unwrap().0.item();
        let lb = sft_loss(&m, &tape, &b).unwrap().0.item();
        assert_eq!(la, lb);
        let none = Batch { mask: vec![0.0; a.mask.len()], ..a };
        assert!(matches!(sft_loss(&m, &tape, &none), Err(Error::Domain(_))));
    }

    #[test]
    fn kd_is_zero_against_itself() {
        let m = tiny();
        let b = Batch::from_pairs(&[(vec![1, 5, 6], vec![7, 8, 2]), (vec![1, 4], vec![9, 10, 11, 2])]).unwrap();
        let tape = Tape::new();
        let (loss, _) = kd_loss(&m, &m, &tape, &b, None, 1.0).unwrap();
        assert!(loss.item().abs() < 1e-9);

        let mut other = m.clone();
        other.config.vocab_size = 41;
        assert!(matches!(kd_loss(&m, &other, &tape, &b, None, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn one_hot_teacher_uniform_student() {
        let tape = Tape::new();
        let mut t = vec![-1e9; 40];
        t[3] = 0.0;
        let p = tape.constant(&[1, 40], t).unwrap();
        let q = tape.leaf(&[1, 40], vec![0.0; 40]).unwrap();
        assert!((p.kl_divergence(&q, &[1.0]).unwrap().item() - 40f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn verifier_examples() {
        let ids = |s: &str| tokenize(s).unwrap();
        assert_eq!(verify_answer(&ids("3;42&ANS& 42 &EOS&"), 42), 1.0);
        assert_eq!(verify_answer(&ids("3;42 42&EOS&"), 42), 0.0);
        assert_eq!(verify_answer(&ids("&ANS& 042"), 42), 1.0);
        assert_eq!(verify_answer(&ids("&ANS&-7&EOS&"), -7), 1.0);
        assert_eq!(verify_answer(&ids("&ANS&1&ANS&-"), 1), 0.0);
        assert_eq!(verify_answer(&ids("&ANS&41"), 42), 0.0);
    }

    #[test]
    fn schedule_endpoints() {
        let c = OptimizerConfig { warmup_steps: 10, total_steps: 100, ..Default::default() };
        assert_eq!(c.lr_at(10), c.peak_lr);
        assert!(c.lr_at(100).abs() < 1e-18);
        assert_eq!(c.lr_at(5), c.peak_lr / 2.0);
        assert!(OptimizerConfig { betas: (1.0, 0.9), ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { warmup_steps: 5000, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn adam_matches_reference_on_constant_gradient() {
        let cfg = OptimizerConfig { peak_lr: 0.1, warmup_steps: 0, total_steps: 10, grad_clip: 0.0, ..Default::default() };
        let mut p = vec![Param { name: "x".into(), shape: vec![1], data: vec![1.0] }];
        let mut opt = Adam::new(&p);
        // independent textbook loop
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 0.5;
            opt.step(&mut p, &[vec![g]], &cfg, t).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.95 * v + 0.05 * g * g;
            let lr = cfg.lr_at(t);
            x -= lr * (m / (1.0 - 0.9f64.powi(t as i32))) / ((v / (1.0 - 0.95f64.powi(t as i32))).sqrt() + 1e-8);
            assert!((p[0].data[0] - x).abs() < 1e-15);
        }
        // the first step moves by almost exactly lr
        let mut q = vec![Param { name: "y".into(), shape: vec![1], data: vec![0.0] }];
        Adam::new(&q).step(&mut q, &[vec![3.0]], &cfg, 1).unwrap();
        assert!((q[0].data[0] + cfg.lr_at(1)).abs() < 1e-8);
    }

    #[test]
    fn nan_gradient_rejected() {
        let cfg = OptimizerConfig::default();
        let mut p = vec![Param { name: "x".into(), shape: vec![1], data: vec![1.0] }];
        let err = Adam::new(&p).step(&mut p, &[vec![f64::NAN]], &cfg, 1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p[0].data[0], 1.0);
    }

    #[test]
    fn advantage_examples() {
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0], 0.0);
        let expect = [1.7320508075688772, -0.5773502691896258, -0.5773502691896258, -0.5773502691896258];
        for (x, y) in a.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(group_advantages(&[0.0; 8], 1e-4), vec![0.0; 8]);
        let shifted = group_advantages(&[4.0, 3.0, 3.0, 3.0], 0.0);
        assert_eq!(a, shifted);
    }

    #[test]
    fn advantages_sum_to_exactly_zero() {
        for g in 2..=32 {
            for k in 1..g {
                let r: Vec<f64> = (0..g).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
                let a = group_advantages(&r, 0.0);
                assert_eq!(a.iter().sum::<f64>(), 0.0);
                let var = a.iter().map(|x| x * x).sum::<f64>() / g as f64;
                assert!((var.sqrt() - 1.0).abs() < 1e-9);
            }
        }
        assert!(group_advantages(&[], 1e-4).is_empty());
    }

    #[test]
    fn kl_estimator_nonnegative() {
        for d in [-5.0, -1.0, -1e-3, 1e-3, 0.5, 3.0] {
            assert!(kl_estimate(d) > 0.0);
        }
        assert_eq!(kl_estimate(0.0), 0.0);
    }

    #[test]
    fn positive_advantage_raises_log_prob() {
        // on-policy: ratio 1, gradient of -surrogate points against log-prob ascent
        let tape = Tape::new();
        let th = tape.leaf(&[1, 2], vec![0.3, -0.2]).unwrap();
        let lp = th.token_log_probs(&[1], 1.0).unwrap();
        let old = lp.value();
        let loss = lp.clipped_surrogate(&old, &[1.0], 0.2).unwrap().sum().scale(-1.0);
        loss.backward().unwrap();
        let g = th.grad().unwrap();
        assert!(g[1] < 0.0 && g[0] > 0.0);
    }

    #[test]
    fn bandit_improves() {
        for seed in [1, 2, 3] {
            let curve = bandit_grpo(seed, 50, 8, 0.1).unwrap();
            assert!(curve.last().unwrap() > &curve[0], "seed {seed}: {curve:?}");
        }
    }

    #[test]
    fn degenerate_group_leaves_only_kl() {
        let mut m = tiny();
        let before = m.params.clone();
        let mut opt = Adam::new(&m.params);
        let prompts = vec![(vec![1u32, 5, 6], 999_999i64)];
        let cfg = GrpoConfig { group_size: 4, ..Default::default() };
        let s = SamplerConfig { max_new_tokens: 4, ..Default::default() };
        let oc = OptimizerConfig { warmup_steps: 0, total_steps: 5, ..Default::default() };
        let met = grpo_step(&mut m, None, &prompts, &cfg, &s, &mut opt, &oc, 1, 9).unwrap();
        assert_eq!(met.reward_mean, 0.0);
        assert_eq!(met.loss, 0.0);
        assert_eq!(m.params, before);

        // with a KL term against itself the loss is still zero on-policy
        let cfg = GrpoConfig { kl_coef: 0.1, ..cfg };
        let reference = m.clone();
        let met = grpo_step(&mut m, Some(&reference), &prompts, &cfg, &s, &mut opt, &oc, 2, 9).unwrap();
        assert!(met.loss.abs() < 1e-12);
    }

    #[test]
    fn rollouts_independent_of_batching() {
        let m = tiny();
        let cfg = GrpoConfig { group_size: 3, ..Default::default() };
        let s = SamplerConfig { max_new_tokens: 5, ..Default::default() };
        let p = vec![(vec![1u32, 5], 1i64), (vec![1u32, 6, 7], 2i64)];
        let both = rollout(&m, &p, &cfg, &s, 4).unwrap();
        let first = rollout(&m, &p[..1], &cfg, &s, 4).unwrap();
        assert_eq!(both[0], first[0]);
    }
}
