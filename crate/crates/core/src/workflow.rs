//! The three-stage pipeline: PTQ initialization, KD or SFT recovery, and
//! cold-start GRPO, preceded by teacher preparation.
//!
//! A run for one seed lives in `<output_dir>/seed-<s>/` and keeps a JSON
//! manifest that is rewritten atomically at every stage boundary. Stage
//! outputs are also stored in a content-keyed cache under
//! `<output_dir>/cache/`, so matrix cells and reruns that share a prefix of
//! stages reuse them instead of recomputing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::autodiff::{FakeQuantMode, Tape};
use crate::error::{Error, Result};
use crate::eval::{evaluate, log_metrics, EvalReport, MetricRecord, StageKind};
use crate::model::{ModelConfig, QuantSettings, SamplerConfig, TinyDecoder};
use crate::objectives::{
    accumulate_grads, derive_seed, grpo_step, kd_loss, sft_loss, teacher_logits, Adam, Batch, GrpoConfig,
    OptimizerConfig,
};
use crate::packing::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint, TensorData};
use crate::ptq::{calibrate_model, gptq, rtn, GptqOptions, LatentMode};
use crate::quant::{QuantSpec, Scheme};
use crate::taskgen::{generate, make_calibration, ArithTaskConfig, CalibKind, Dataset, Example};

pub const CODE_VERSION: &str = concat!("rqat ", env!("CARGO_PKG_VERSION"));

/// Git-style blob hash of [`CODE_VERSION`].
pub fn code_hash() -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", CODE_VERSION.len()));
    h.update(CODE_VERSION);
    hex::encode(h.finalize())
}

pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMode {
    Train,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub mode: TeacherMode,
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub eval_every: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            mode: TeacherMode::Train,
            path: None,
            seed: 0,
            optimizer: OptimizerConfig { peak_lr: 1e-3, warmup_steps: 200, total_steps: 2000, ..Default::default() },
            eval_every: 250,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PtqMethod {
    Rtn,
    Gptq,
}

impl std::str::FromStr for PtqMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtn" => Ok(PtqMethod::Rtn),
            "gptq" => Ok(PtqMethod::Gptq),
            _ => Err(Error::config(format!("unknown PTQ method '{s}'"))),
        }
    }
}

impl PtqMethod {
    /// RTN rounds symmetrically, GPTQ solves on an asymmetric grid.
    pub fn default_scheme(self) -> Scheme {
        match self {
            PtqMethod::Rtn => Scheme::Symmetric,
            PtqMethod::Gptq => Scheme::Asymmetric,
        }
    }
}

/// A fixed bit-width or `"auto"` for the adaptive choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bits {
    Fixed(u8),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl Bits {
    pub const AUTO: Bits = Bits::Auto(AutoTag::Auto);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub method: PtqMethod,
    pub calib: CalibKind,
    pub calib_tokens: usize,
    pub bits: Bits,
    pub group_size: usize,
    /// Unset means the method's own scheme.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    pub percdamp: f64,
    pub latent: LatentMode,
    pub fake_quant: FakeQuantMode,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            method: PtqMethod::Gptq,
            calib: CalibKind::InDomain,
            calib_tokens: 4096,
            bits: Bits::AUTO,
            group_size: 128,
            scheme: None,
            percdamp: 0.01,
            latent: LatentMode::Dequantized,
            fake_quant: FakeQuantMode::DynamicMinmax,
        }
    }
}

impl InitConfig {
    pub fn scheme(&self) -> Scheme {
        self.scheme.unwrap_or(self.method.default_scheme())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Objective {
    Sft,
    Kd,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub objective: Stage2Objective,
    /// Softening temperature for both KD distributions.
    pub kd_temperature: f64,
    pub optimizer: OptimizerConfig,
    pub eval_every: usize,
    pub checkpoint_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            objective: Stage2Objective::Kd,
            kd_temperature: 1.0,
            optimizer: OptimizerConfig::default(),
            eval_every: 100,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage3Algorithm {
    Grpo,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage3Config {
    pub algorithm: Stage3Algorithm,
    pub grpo: GrpoConfig,
    pub optimizer: OptimizerConfig,
    /// Rollout sampling; the policy density for the ratio uses its temperature.
    pub sampler: SamplerConfig,
    pub cold_start: Option<PathBuf>,
    pub eval_every: usize,
    pub checkpoint_every: usize,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            algorithm: Stage3Algorithm::Grpo,
            grpo: GrpoConfig::default(),
            optimizer: OptimizerConfig {
                peak_lr: 1e-5,
                warmup_steps: 10,
                global_batch: 32,
                total_steps: 250,
                ..Default::default()
            },
            sampler: SamplerConfig { temperature: 1.0, top_p: 1.0, max_new_tokens: 128, seed: 0 },
            cold_start: None,
            eval_every: 50,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    pub seeds: Vec<u64>,
    pub samples_per_problem: usize,
    /// Eval problems used for the in-training accuracy curves.
    pub curve_problems: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sampler: SamplerConfig::default(), seeds: vec![0], samples_per_problem: 1, curve_problems: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkflowConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub allow_zero_rl: bool,
    pub model: ModelConfig,
    pub data: ArithTaskConfig,
    pub teacher: TeacherConfig,
    pub init: InitConfig,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub eval: EvalConfig,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            seeds: vec![1, 2, 3],
            allow_zero_rl: false,
            model: ModelConfig::default(),
            data: ArithTaskConfig::default(),
            teacher: TeacherConfig::default(),
            init: InitConfig::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl WorkflowConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.quant.is_some() {
            return Err(Error::config("model.quant is derived from [init]; leave it unset"));
        }
        self.model.validate()?;
        self.data.validate()?;
        if self.model.vocab_size < crate::taskgen::VOCAB_SIZE {
            return Err(Error::config(format!("vocab_size must be at least {}", crate::taskgen::VOCAB_SIZE)));
        }
        if self.data.max_seq_len > self.model.max_seq_len {
            return Err(Error::config("data.max_seq_len exceeds model.max_seq_len"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one workflow seed is required"));
        }
        if self.teacher.mode == TeacherMode::Load && self.teacher.path.is_none() {
            return Err(Error::config("teacher.mode = \"load\" needs teacher.path"));
        }
        self.teacher.optimizer.validate()?;
        if let Bits::Fixed(b) = self.init.bits {
            QuantSpec::grouped(b, self.init.group_size, self.init.scheme())?;
        }
        if self.stage2.objective != Stage2Objective::None {
            self.stage2.optimizer.validate()?;
            if !(self.stage2.kd_temperature > 0.0 && self.stage2.kd_temperature.is_finite()) {
                return Err(Error::config("stage2.kd_temperature must be positive"));
            }
        }
        if self.stage3.algorithm == Stage3Algorithm::Grpo {
            self.stage3.grpo.validate()?;
            self.stage3.optimizer.validate()?;
            self.stage3.sampler.validate()?;
            if self.stage2.objective == Stage2Objective::None && self.stage3.cold_start.is_none() && !self.allow_zero_rl {
                return Err(Error::config(
                    "GRPO needs a cold start: configure a stage-2 recovery or stage3.cold_start, \
                     or set allow_zero_rl to run RL directly on the PTQ model",
                ));
            }
        }
        self.eval.sampler.validate()?;
        if self.eval.seeds.is_empty() || self.eval.samples_per_problem == 0 {
            return Err(Error::config("eval needs seeds and samples_per_problem > 0"));
        }
        if self.data.n_eval == 0 {
            return Err(Error::config("data.n_eval must be positive"));
        }
        Ok(())
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed-{seed}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Pending,
    Done,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub input: Option<FileDigest>,
    pub output: Option<FileDigest>,
    pub wall_clock_s: f64,
    /// Seconds the stage's computation took when it actually ran. Equals
    /// `wall_clock_s` unless the output was reused from the stage cache.
    #[serde(default)]
    pub compute_s: f64,
    #[serde(default)]
    pub cached: bool,
    pub eval: Option<EvalReport>,
    #[serde(default)]
    pub notes: BTreeMap<String, Value>,
    pub error: Option<String>,
}

impl StageRecord {
    fn pending(name: &str) -> Self {
        Self {
            name: name.into(),
            status: StageStatus::Pending,
            input: None,
            output: None,
            wall_clock_s: 0.0,
            compute_s: 0.0,
            cached: false,
            eval: None,
            notes: BTreeMap::new(),
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: WorkflowConfig,
    pub seed: u64,
    pub code_version: String,
    pub code_hash: String,
    pub stages: Vec<StageRecord>,
}

pub const STAGES: [&str; 4] = ["teacher", "ptq-init", "stage2", "stage3"];
pub const MANIFEST: &str = "manifest.json";

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn is_complete(&self) -> bool {
        self.stages.iter().all(|s| matches!(s.status, StageStatus::Done | StageStatus::Skipped))
    }

    /// Evaluation of the last stage that produced a model.
    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.stages.iter().rev().filter(|s| s.status == StageStatus::Done).find_map(|s| s.eval.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(format!("bad manifest: {e}")))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        write_atomic(&dir.join(MANIFEST), &text)
    }
}

/// Test and CLI hooks that are not part of the experiment configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Fail the named stage once it reaches this optimizer step.
    pub halt_at: Option<(String, usize)>,
    /// Disable reuse of cached stage outputs.
    pub no_cache: bool,
    pub verbose: bool,
}

// ---------------------------------------------------------------------------
// Training loops

/// Batch of `n` training pairs drawn deterministically for (seed, step, k).
fn draw_pairs(train: &[Example], n: usize, seed: u64, step: usize, k: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, ((step as u64) << 16) | k as u64));
    sample(&mut rng, train.len(), n.min(train.len()))
        .into_iter()
        .map(|i| (train[i].prompt_ids(), train[i].response_ids()))
        .collect()
}

/// Accuracy curve probe run during training.
pub struct CurveEval<'a> {
    pub problems: &'a [Example],
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub every: usize,
}

impl CurveEval<'_> {
    fn due(&self, step: usize, total: usize) -> bool {
        self.every > 0 && (step % self.every == 0 || step == total)
    }

    fn run(&self, model: &TinyDecoder) -> Result<EvalReport> {
        evaluate(model, self.problems, &self.sampler, &[self.seed], 1)
    }
}

/// Optimizer state saved periodically so an interrupted stage can resume.
pub struct TrainState {
    pub model: TinyDecoder,
    pub adam: Adam,
    pub step: usize,
}

impl TrainState {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint()?;
        ck.meta.insert("train_step".into(), json!(self.step));
        ck.meta.insert("adam_t".into(), json!(self.adam.t));
        for (i, p) in self.model.params.iter().enumerate() {
            ck.push(format!("adam.m/{}", p.name), TensorData::dense(p.shape.clone(), self.adam.m[i].clone()));
            ck.push(format!("adam.v/{}", p.name), TensorData::dense(p.shape.clone(), self.adam.v[i].clone()));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = TinyDecoder::from_checkpoint(ck)?;
        let get = |k: &str| {
            ck.meta.get(k).and_then(Value::as_u64).ok_or_else(|| Error::format(format!("state lacks '{k}'")))
        };
        let mut adam = Adam::new(&model.params);
        adam.t = get("adam_t")? as usize;
        for (i, p) in model.params.iter().enumerate() {
            adam.m[i].copy_from_slice(ck.dense(&format!("adam.m/{}", p.name))?.1);
            adam.v[i].copy_from_slice(ck.dense(&format!("adam.v/{}", p.name))?.1);
        }
        Ok(Self { model, adam, step: get("train_step")? as usize })
    }
}

pub struct SupervisedRun<'a> {
    pub stage: StageKind,
    pub teacher: Option<&'a TinyDecoder>,
    pub kd_temperature: f64,
    pub train: &'a [Example],
    pub opt: &'a OptimizerConfig,
    pub seed: u64,
    pub curve: Option<CurveEval<'a>>,
    pub metrics: Option<&'a Path>,
    /// Where to write resumable state, and how often.
    pub state: Option<(&'a Path, usize)>,
    pub halt_at: Option<usize>,
}

fn curve_record(stage: StageKind, step: usize, r: &EvalReport, t0: Instant) -> MetricRecord {
    let mut rec = MetricRecord::new(stage, step as u64);
    rec.eval_accuracy = Some(r.accuracy);
    rec.mean_length = Some(r.mean_response_length);
    rec.entropy = Some(r.mean_token_entropy);
    rec.wall_clock_s = Some(t0.elapsed().as_secs_f64());
    rec
}

fn maybe_log(path: Option<&Path>, rec: &MetricRecord) -> Result<()> {
    match path {
        Some(p) => log_metrics(p, rec),
        None => Ok(()),
    }
}

/// SFT (no teacher) or KD (with teacher) on `run.train`. Resumes from `start`
/// when given. Returns the per-checkpoint accuracy curve.
pub fn train_supervised(model: &mut TinyDecoder, run: &SupervisedRun, start: Option<TrainState>) -> Result<Vec<(usize, f64)>> {
    run.opt.validate()?;
    if run.train.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    let t0 = Instant::now();
    let (mut adam, first) = match start {
        Some(s) => {
            *model = s.model;
            (s.adam, s.step + 1)
        }
        None => (Adam::new(&model.params), 1),
    };
    let mut curve = Vec::new();
    if first == 1 {
        if let Some(c) = &run.curve {
            let r = c.run(model)?;
            curve.push((0, r.accuracy));
            maybe_log(run.metrics, &curve_record(run.stage, 0, &r, t0))?;
        }
    }
    let micro = run.opt.micro_batch();
    for step in first..=run.opt.total_steps {
        if run.halt_at == Some(step) {
            return Err(Error::domain(format!("halted at step {step}")));
        }
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut loss_sum = 0.0;
        for k in 0..run.opt.grad_accum {
            let batch = Batch::from_pairs(&draw_pairs(run.train, micro, run.seed, step, k))?;
            let tape = Tape::new();
            let (loss, handles) = match run.teacher {
                Some(t) => {
                    let tl = teacher_logits(t, &batch)?;
                    kd_loss(model, t, &tape, &batch, Some(&tl), run.kd_temperature)?
                }
                None => sft_loss(model, &tape, &batch)?,
            };
            loss.backward()?;
            loss_sum += loss.item();
            accumulate_grads(&mut grads, &handles);
        }
        let inv = 1.0 / run.opt.grad_accum as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        let lr = adam.step(&mut model.params, &grads, run.opt, step)?;
        let mut rec = MetricRecord::new(run.stage, step as u64);
        rec.loss = Some(loss_sum * inv);
        rec.lr = Some(lr);
        rec.wall_clock_s = Some(t0.elapsed().as_secs_f64());
        maybe_log(run.metrics, &rec)?;
        if let Some(c) = &run.curve {
            if c.due(step, run.opt.total_steps) {
                let r = c.run(model)?;
                curve.push((step, r.accuracy));
                maybe_log(run.metrics, &curve_record(run.stage, step, &r, t0))?;
            }
        }
        if let Some((path, every)) = run.state {
            if every > 0 && step % every == 0 && step < run.opt.total_steps {
                let st = TrainState { model: model.clone(), adam: adam.clone(), step };
                save_checkpoint(path, &st.to_checkpoint()?)?;
            }
        }
    }
    Ok(curve)
}

pub struct RlRun<'a> {
    pub train: &'a [Example],
    pub cfg: &'a GrpoConfig,
    pub opt: &'a OptimizerConfig,
    pub sampler: &'a SamplerConfig,
    pub reference: Option<&'a TinyDecoder>,
    pub seed: u64,
    pub curve: Option<CurveEval<'a>>,
    pub metrics: Option<&'a Path>,
    pub state: Option<(&'a Path, usize)>,
    pub halt_at: Option<usize>,
}

/// GRPO training; one optimizer update per rollout batch.
pub fn train_rl(model: &mut TinyDecoder, run: &RlRun, start: Option<TrainState>) -> Result<Vec<(usize, f64)>> {
    run.cfg.validate()?;
    run.opt.validate()?;
    let t0 = Instant::now();
    let (mut adam, first) = match start {
        Some(s) => {
            *model = s.model;
            (s.adam, s.step + 1)
        }
        None => (Adam::new(&model.params), 1),
    };
    let mut curve = Vec::new();
    if first == 1 {
        if let Some(c) = &run.curve {
            let r = c.run(model)?;
            curve.push((0, r.accuracy));
            maybe_log(run.metrics, &curve_record(StageKind::Eval, 0, &r, t0))?;
        }
    }
    for step in first..=run.opt.total_steps {
        if run.halt_at == Some(step) {
            return Err(Error::domain(format!("halted at step {step}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed ^ 0x5EED_0F_C0FFEE, step as u64));
        let prompts: Vec<(Vec<u32>, i64)> = sample(&mut rng, run.train.len(), run.cfg.batch_prompts.min(run.train.len()))
            .into_iter()
            .map(|i| (run.train[i].prompt_ids(), run.train[i].answer))
            .collect();
        let m = grpo_step(
            model,
            run.reference,
            &prompts,
            run.cfg,
            run.sampler,
            &mut adam,
            run.opt,
            step,
            derive_seed(run.seed, step as u64),
        )
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("GRPO step {step}: {msg}")),
            other => other,
        })?;
        let mut rec = MetricRecord::new(StageKind::Rl, step as u64);
        rec.loss = Some(m.loss);
        rec.reward_mean = Some(m.reward_mean);
        rec.mean_length = Some(m.mean_length);
        rec.entropy = Some(m.entropy);
        rec.lr = Some(m.lr);
        rec.wall_clock_s = Some(t0.elapsed().as_secs_f64());
        maybe_log(run.metrics, &rec)?;
        if let Some(c) = &run.curve {
            if c.due(step, run.opt.total_steps) {
                let r = c.run(model)?;
                curve.push((step, r.accuracy));
                maybe_log(run.metrics, &curve_record(StageKind::Eval, step, &r, t0))?;
            }
        }
        if let Some((path, every)) = run.state {
            if every > 0 && step % every == 0 && step < run.opt.total_steps {
                let st = TrainState { model: model.clone(), adam: adam.clone(), step };
                save_checkpoint(path, &st.to_checkpoint()?)?;
            }
        }
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// PTQ initialization

/// Dense checkpoint tagged with the stage that produced it; `rl` refuses
/// checkpoints tagged "ptq" unless zero-RL is allowed.
pub fn stage_checkpoint(model: &TinyDecoder, stage: &str) -> Result<Checkpoint> {
    let mut ck = model.to_checkpoint()?;
    ck.meta.insert("stage".into(), json!(stage));
    Ok(ck)
}

pub fn quant_spec(init: &InitConfig, bits: u8) -> Result<QuantSpec> {
    QuantSpec::grouped(bits, init.group_size, init.scheme())
}

/// Quantized student from `teacher`: calibrate (GPTQ only), solve each
/// quantizable layer, and switch fake quantization on. Returns the model and
/// the summed proxy loss.
pub fn ptq_init(
    teacher: &TinyDecoder,
    method: PtqMethod,
    spec: &QuantSpec,
    calib: &[Vec<u32>],
    percdamp: f64,
    latent: LatentMode,
    mode: FakeQuantMode,
) -> Result<(TinyDecoder, f64)> {
    let mut student = teacher.clone();
    student.set_quant(None)?;
    student.frozen.clear();
    let accs = match method {
        PtqMethod::Gptq => Some(calibrate_model(teacher, calib)?),
        PtqMethod::Rtn => None,
    };
    let mut total = 0.0;
    for name in teacher.quantizable_layers() {
        let w = teacher.weight(&name)?;
        let res = match &accs {
            Some(a) => gptq(&w, &a[&name], spec, &GptqOptions { percdamp, act_order: false })?,
            None => rtn(&w, spec)?,
        };
        total += res.proxy_loss;
        student.set_weight(&name, res.latent_for(latent))?;
        student.frozen.insert(name, res.quantized.params.clone());
    }
    student.set_quant(Some(QuantSettings { spec: *spec, mode }))?;
    Ok((student, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitChoice {
    pub bits: u8,
    pub teacher_accuracy: f64,
    /// RTN-init accuracy per candidate bit-width that was evaluated.
    pub probes: Vec<(u8, f64)>,
    pub satisfied: bool,
}

/// Smallest N in {2, 3, 4} whose RTN initialization scores below half the
/// teacher's accuracy on the curve problems. Falls back to 2 when none does.
pub fn choose_bits(teacher: &TinyDecoder, init: &InitConfig, curve: &CurveEval) -> Result<BitChoice> {
    let teacher_accuracy = curve.run(teacher)?.accuracy;
    let mut probes = Vec::new();
    let rtn_scheme = init.scheme.unwrap_or(PtqMethod::Rtn.default_scheme());
    for bits in 2..=4u8 {
        let spec = QuantSpec::grouped(bits, init.group_size, rtn_scheme)?;
        let (m, _) = ptq_init(teacher, PtqMethod::Rtn, &spec, &[], init.percdamp, init.latent, init.fake_quant)?;
        let acc = curve.run(&m)?.accuracy;
        probes.push((bits, acc));
        if acc < 0.5 * teacher_accuracy {
            return Ok(BitChoice { bits, teacher_accuracy, probes, satisfied: true });
        }
    }
    Ok(BitChoice { bits: 2, teacher_accuracy, probes, satisfied: false })
}

// ---------------------------------------------------------------------------
// Orchestration

fn sha_json(v: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json values serialize")))
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

fn link_or_copy(from: &Path, to: &Path) -> Result<()> {
    if to.exists() {
        std::fs::remove_file(to)?;
    }
    if std::fs::hard_link(from, to).is_err() {
        std::fs::copy(from, to)?;
    }
    Ok(())
}

fn copy_dir_files(from: &Path, to: &Path) -> Result<()> {
    std::fs::create_dir_all(to)?;
    for e in std::fs::read_dir(from)? {
        let e = e?;
        if e.file_type()?.is_file() {
            link_or_copy(&e.path(), &to.join(e.file_name()))?;
        }
    }
    Ok(())
}

struct Ctx<'a> {
    cfg: &'a WorkflowConfig,
    ds: Dataset,
    opts: &'a RunOptions,
}

impl Ctx<'_> {
    fn curve(&self) -> CurveEval<'_> {
        let n = self.cfg.eval.curve_problems.min(self.ds.eval.len()).max(1);
        CurveEval {
            problems: &self.ds.eval[..n],
            sampler: self.cfg.eval.sampler.clone(),
            seed: self.cfg.eval.seeds[0],
            every: 0,
        }
    }

    fn full_eval(&self, model: &TinyDecoder) -> Result<EvalReport> {
        let e = &self.cfg.eval;
        evaluate(model, &self.ds.eval, &e.sampler, &e.seeds, e.samples_per_problem)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.opts.verbose {
            eprintln!("[rqat] {}", msg.as_ref());
        }
    }

    fn cache_dir(&self, key: &str) -> PathBuf {
        self.cfg.output_dir.join("cache").join(key)
    }
}

/// Teacher checkpoint shared by every seed, trained once per configuration.
/// Trained (or loaded) teacher checkpoint, its report, the seconds spent
/// producing it, and whether it was reused.
fn prepare_teacher(ctx: &Ctx) -> Result<(PathBuf, EvalReport, f64, bool)> {
    let t0 = Instant::now();
    let cfg = ctx.cfg;
    if cfg.teacher.mode == TeacherMode::Load {
        let path = cfg.teacher.path.clone().unwrap();
        if !path.exists() {
            return Err(Error::config(format!("teacher checkpoint {} does not exist", path.display())));
        }
        let t = TinyDecoder::from_checkpoint(&load_checkpoint(&path)?)?;
        if t.config.vocab_size != cfg.model.vocab_size {
            return Err(Error::config("loaded teacher vocabulary differs from model.vocab_size"));
        }
        let report = ctx.full_eval(&t)?;
        return Ok((path.canonicalize()?, report, t0.elapsed().as_secs_f64(), false));
    }
    let key = sha_json(&json!({
        "stage": "teacher", "model": cfg.model, "data": cfg.data, "teacher": cfg.teacher,
        "eval": cfg.eval, "code": code_hash(),
    }));
    let dir = cfg.output_dir.join(format!("teacher-{}", &key[..12]));
    let ckpt = dir.join("model.ckpt");
    let eval_path = dir.join("record.json");
    if ckpt.exists() && eval_path.exists() {
        let stored: Value = serde_json::from_slice(&std::fs::read(&eval_path)?)?;
        let report: EvalReport = serde_json::from_value(stored["eval"].clone())?;
        return Ok((ckpt, report, stored["compute_s"].as_f64().unwrap_or(0.0), true));
    }
    std::fs::create_dir_all(&dir)?;
    let metrics = dir.join("metrics.jsonl");
    if metrics.exists() {
        std::fs::remove_file(&metrics)?;
    }
    ctx.log(format!("training teacher in {}", dir.display()));
    let mut model = TinyDecoder::new(cfg.model.clone(), cfg.teacher.seed)?;
    let mut curve = ctx.curve();
    curve.every = cfg.teacher.eval_every;
    let run = SupervisedRun {
        stage: StageKind::Teacher,
        teacher: None,
        kd_temperature: 1.0,
        train: &ctx.ds.train,
        opt: &cfg.teacher.optimizer,
        seed: cfg.teacher.seed,
        curve: Some(curve),
        metrics: Some(&metrics),
        state: None,
        halt_at: None,
    };
    train_supervised(&mut model, &run, None)?;
    save_checkpoint(&ckpt, &stage_checkpoint(&model, "teacher")?)?;
    let report = ctx.full_eval(&model)?;
    let compute_s = t0.elapsed().as_secs_f64();
    write_atomic(&eval_path, &serde_json::to_vec_pretty(&json!({ "eval": report, "compute_s": compute_s }))?)?;
    Ok((ckpt, report, compute_s, false))
}

/// Runs every configured seed and returns one manifest per seed.
pub fn run(cfg: &WorkflowConfig, opts: &RunOptions) -> Result<Vec<RunManifest>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let ctx = Ctx { cfg, ds: generate(&cfg.data)?, opts };
    cfg.seeds.iter().map(|&s| run_seed(&ctx, s, None)).collect()
}

/// Continues a run from its manifest; completed stages are verified and kept.
pub fn resume(manifest_path: impl AsRef<Path>, opts: &RunOptions) -> Result<RunManifest> {
    let manifest_path = manifest_path.as_ref();
    let manifest = RunManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    verify_manifest(&manifest, dir)?;
    if manifest.is_complete() {
        return Ok(manifest);
    }
    let cfg = manifest.config.clone();
    cfg.validate()?;
    let ctx = Ctx { cfg: &cfg, ds: generate(&cfg.data)?, opts };
    run_in_dir(&ctx, manifest.seed, dir, Some(manifest))
}

/// Checks every recorded output digest of completed stages.
pub fn verify_manifest(m: &RunManifest, dir: &Path) -> Result<()> {
    for s in m.stages.iter().filter(|s| s.status == StageStatus::Done) {
        for f in [&s.input, &s.output].into_iter().flatten() {
            let p = resolve(dir, &f.path);
            let actual = file_digest(&p)
                .map_err(|e| Error::integrity(format!("stage '{}': cannot read {}: {e}", s.name, p.display())))?;
            if actual != f.sha256 {
                return Err(Error::integrity(format!("stage '{}': digest mismatch for {}", s.name, p.display())));
            }
        }
    }
    Ok(())
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn run_seed(ctx: &Ctx, seed: u64, existing: Option<RunManifest>) -> Result<RunManifest> {
    run_in_dir(ctx, seed, &ctx.cfg.run_dir(seed), existing)
}

fn run_in_dir(ctx: &Ctx, seed: u64, dir: &Path, existing: Option<RunManifest>) -> Result<RunManifest> {
    let cfg = ctx.cfg;
    std::fs::create_dir_all(dir)?;
    let mut m = match existing {
        Some(m) => m,
        // a matching manifest on disk turns a plain rerun into a resume
        None => match RunManifest::load(dir.join(MANIFEST)) {
            Ok(old) if old.config == *cfg && old.seed == seed && verify_manifest(&old, dir).is_ok() => old,
            _ => RunManifest {
                config: cfg.clone(),
                seed,
                code_version: CODE_VERSION.into(),
                code_hash: code_hash(),
                stages: STAGES.iter().map(|s| StageRecord::pending(s)).collect(),
            },
        },
    };
    if m.is_complete() {
        return Ok(m);
    }
    for i in 0..m.stages.len() {
        if matches!(m.stages[i].status, StageStatus::Done | StageStatus::Skipped) {
            continue;
        }
        let name = m.stages[i].name.clone();
        let t0 = Instant::now();
        let result = run_stage(ctx, seed, dir, &name, &m);
        let elapsed = t0.elapsed().as_secs_f64();
        match result {
            Ok(mut rec) => {
                rec.wall_clock_s = elapsed;
                m.stages[i] = rec;
                m.save(dir)?;
            }
            Err(e) => {
                let rec = &mut m.stages[i];
                rec.status = StageStatus::Failed;
                rec.error = Some(e.to_string());
                rec.wall_clock_s = elapsed;
                m.save(dir)?;
                return Err(e);
            }
        }
    }
    Ok(m)
}

fn digest_of(path: &Path, base: &Path) -> Result<FileDigest> {
    Ok(FileDigest { path: rel(path, base), sha256: file_digest(path)? })
}

fn previous_output<'m>(m: &'m RunManifest, upto: &str) -> Option<&'m FileDigest> {
    m.stages
        .iter()
        .take_while(|s| s.name != upto)
        .filter(|s| s.status == StageStatus::Done)
        .filter_map(|s| s.output.as_ref())
        .last()
}

fn run_stage(ctx: &Ctx, seed: u64, dir: &Path, name: &str, m: &RunManifest) -> Result<StageRecord> {
    let cfg = ctx.cfg;
    let mut rec = StageRecord::pending(name);
    match name {
        "teacher" => {
            let (path, report, compute_s, reused) = prepare_teacher(ctx)?;
            rec.compute_s = compute_s;
            rec.cached = reused;
            ctx.log(format!("seed {seed}: teacher accuracy {:.3}", report.accuracy));
            let path = path.canonicalize()?;
            rec.output = Some(FileDigest { path: path.to_string_lossy().into_owned(), sha256: file_digest(&path)? });
            rec.eval = Some(report);
            rec.status = StageStatus::Done;
            Ok(rec)
        }
        "ptq-init" => {
            let teacher_d = m.stage("teacher").and_then(|s| s.output.clone()).ok_or_else(|| Error::config("teacher stage missing"))?;
            rec.input = Some(teacher_d.clone());
            let key = sha_json(&json!({
                "stage": name, "init": cfg.init, "data": cfg.data, "eval": cfg.eval,
                "teacher": teacher_d.sha256, "seed": seed, "code": code_hash(),
            }));
            cached_stage(ctx, dir, name, &key, rec, |sd| {
                let teacher = TinyDecoder::from_checkpoint(&load_checkpoint(resolve(dir, &teacher_d.path))?)?;
                let mut notes = BTreeMap::new();
                let bits = match cfg.init.bits {
                    Bits::Fixed(b) => b,
                    Bits::Auto(_) => {
                        let choice = cached_bit_choice(ctx, &teacher, &teacher_d.sha256)?;
                        notes.insert("bit_choice".into(), serde_json::to_value(&choice)?);
                        choice.bits
                    }
                };
                let spec = quant_spec(&cfg.init, bits)?;
                let calib = make_calibration(cfg.init.calib, cfg.init.calib_tokens, seed, &cfg.data, &ctx.ds)?;
                let (student, proxy) =
                    ptq_init(&teacher, cfg.init.method, &spec, &calib, cfg.init.percdamp, cfg.init.latent, cfg.init.fake_quant)?;
                notes.insert("bits".into(), json!(bits));
                notes.insert("proxy_loss".into(), json!(proxy));
                save_checkpoint(sd.join("model.ckpt"), &stage_checkpoint(&student, "ptq")?)?;
                let report = ctx.full_eval(&student)?;
                ctx.log(format!("seed {seed}: {:?} W{bits} init accuracy {:.3}", cfg.init.method, report.accuracy));
                Ok((report, notes))
            })
        }
        "stage2" => {
            if cfg.stage2.objective == Stage2Objective::None {
                rec.status = StageStatus::Skipped;
                return Ok(rec);
            }
            let input = previous_output(m, name).cloned().ok_or_else(|| Error::config("stage2 has no input model"))?;
            let teacher_d = m.stage("teacher").and_then(|s| s.output.clone()).unwrap();
            rec.input = Some(input.clone());
            let key = sha_json(&json!({
                "stage": name, "stage2": cfg.stage2, "data": cfg.data, "eval": cfg.eval,
                "input": input.sha256, "teacher": teacher_d.sha256, "seed": seed, "code": code_hash(),
            }));
            cached_stage(ctx, dir, name, &key, rec, |sd| {
                let mut model = TinyDecoder::from_checkpoint(&load_checkpoint(resolve(dir, &input.path))?)?;
                let teacher = match cfg.stage2.objective {
                    Stage2Objective::Kd => Some(TinyDecoder::from_checkpoint(&load_checkpoint(resolve(dir, &teacher_d.path))?)?),
                    _ => None,
                };
                let state_path = sd.join("state.ckpt");
                let metrics = sd.join("metrics.jsonl");
                let start = resume_state(&state_path, &metrics)?;
                let mut curve = ctx.curve();
                curve.every = cfg.stage2.eval_every;
                let stage = if teacher.is_some() { StageKind::Kd } else { StageKind::Sft };
                let run = SupervisedRun {
                    stage,
                    teacher: teacher.as_ref(),
                    kd_temperature: cfg.stage2.kd_temperature,
                    train: &ctx.ds.train,
                    opt: &cfg.stage2.optimizer,
                    seed: derive_seed(seed, 2),
                    curve: Some(curve),
                    metrics: Some(&metrics),
                    state: Some((&state_path, cfg.stage2.checkpoint_every)),
                    halt_at: halt_for(ctx, name),
                };
                train_supervised(&mut model, &run, start)?;
                let tag = if teacher.is_some() { "kd" } else { "sft" };
                save_checkpoint(sd.join("model.ckpt"), &stage_checkpoint(&model, tag)?)?;
                let _ = std::fs::remove_file(&state_path);
                let report = ctx.full_eval(&model)?;
                ctx.log(format!("seed {seed}: {stage:?} accuracy {:.3}", report.accuracy));
                Ok((report, BTreeMap::new()))
            })
        }
        "stage3" => {
            if cfg.stage3.algorithm == Stage3Algorithm::None {
                rec.status = StageStatus::Skipped;
                return Ok(rec);
            }
            let input = match &cfg.stage3.cold_start {
                Some(p) => {
                    if !p.exists() {
                        return Err(Error::config(format!("cold-start checkpoint {} does not exist", p.display())));
                    }
                    digest_of(&p.canonicalize()?, dir)?
                }
                None => previous_output(m, name).cloned().ok_or_else(|| Error::config("stage3 has no input model"))?,
            };
            rec.input = Some(input.clone());
            let key = sha_json(&json!({
                "stage": name, "stage3": cfg.stage3, "data": cfg.data, "eval": cfg.eval,
                "input": input.sha256, "seed": seed, "code": code_hash(),
            }));
            cached_stage(ctx, dir, name, &key, rec, |sd| {
                let mut model = TinyDecoder::from_checkpoint(&load_checkpoint(resolve(dir, &input.path))?)?;
                let reference = (cfg.stage3.grpo.kl_coef > 0.0).then(|| model.clone());
                let state_path = sd.join("state.ckpt");
                let metrics = sd.join("metrics.jsonl");
                let start = resume_state(&state_path, &metrics)?;
                let mut curve = ctx.curve();
                curve.every = cfg.stage3.eval_every;
                let run = RlRun {
                    train: &ctx.ds.train,
                    cfg: &cfg.stage3.grpo,
                    opt: &cfg.stage3.optimizer,
                    sampler: &cfg.stage3.sampler,
                    reference: reference.as_ref(),
                    seed: derive_seed(seed, 3),
                    curve: Some(curve),
                    metrics: Some(&metrics),
                    state: Some((&state_path, cfg.stage3.checkpoint_every)),
                    halt_at: halt_for(ctx, name),
                };
                train_rl(&mut model, &run, start)?;
                save_checkpoint(sd.join("model.ckpt"), &stage_checkpoint(&model, "rl")?)?;
                let _ = std::fs::remove_file(&state_path);
                let report = ctx.full_eval(&model)?;
                ctx.log(format!("seed {seed}: GRPO accuracy {:.3}", report.accuracy));
                Ok((report, BTreeMap::new()))
            })
        }
        other => Err(Error::config(format!("unknown stage '{other}'"))),
    }
}

fn halt_for(ctx: &Ctx, stage: &str) -> Option<usize> {
    ctx.opts.halt_at.as_ref().filter(|(s, _)| s == stage).map(|(_, n)| *n)
}

/// Loads saved optimizer state and trims metric records past its step.
fn resume_state(state_path: &Path, metrics: &Path) -> Result<Option<TrainState>> {
    if !state_path.exists() {
        if metrics.exists() {
            std::fs::remove_file(metrics)?;
        }
        return Ok(None);
    }
    let st = TrainState::from_checkpoint(&load_checkpoint(state_path)?)?;
    if metrics.exists() {
        let kept: Vec<String> = std::fs::read_to_string(metrics)?
            .lines()
            .filter(|l| serde_json::from_str::<MetricRecord>(l).map(|r| r.step as usize <= st.step).unwrap_or(false))
            .map(|l| format!("{l}\n"))
            .collect();
        write_atomic(metrics, kept.concat().as_bytes())?;
    }
    Ok(Some(st))
}

/// Runs `body` in the stage directory unless the cache already holds the
/// result for `key`; either way the stage directory ends up populated.
fn cached_stage(
    ctx: &Ctx,
    dir: &Path,
    name: &str,
    key: &str,
    mut rec: StageRecord,
    body: impl FnOnce(&Path) -> Result<(EvalReport, BTreeMap<String, Value>)>,
) -> Result<StageRecord> {
    let sd = dir.join(name);
    let cache = ctx.cache_dir(key);
    let record_file = "record.json";
    let hit = !ctx.opts.no_cache && cache.join(record_file).exists();
    if hit {
        ctx.log(format!("{name}: reusing cached result {}", &key[..12]));
        if sd.exists() {
            std::fs::remove_dir_all(&sd)?;
        }
        copy_dir_files(&cache, &sd)?;
    } else {
        std::fs::create_dir_all(&sd)?;
        let _ = std::fs::remove_file(sd.join(record_file));
        let t0 = Instant::now();
        let (report, notes) = body(&sd)?;
        let stored = json!({ "eval": report, "notes": notes, "compute_s": t0.elapsed().as_secs_f64() });
        write_atomic(&sd.join(record_file), &serde_json::to_vec_pretty(&stored)?)?;
        if !ctx.opts.no_cache {
            let tmp = cache.with_extension("partial");
            if tmp.exists() {
                std::fs::remove_dir_all(&tmp)?;
            }
            copy_dir_files(&sd, &tmp)?;
            if cache.exists() {
                std::fs::remove_dir_all(&cache)?;
            }
            std::fs::rename(&tmp, &cache)?;
        }
    }
    let stored: Value = serde_json::from_slice(&std::fs::read(sd.join(record_file))?)?;
    rec.eval = Some(serde_json::from_value(stored["eval"].clone())?);
    rec.notes = serde_json::from_value(stored["notes"].clone())?;
    rec.compute_s = stored["compute_s"].as_f64().unwrap_or(0.0);
    rec.cached = hit;
    rec.output = Some(digest_of(&sd.join("model.ckpt"), dir)?);
    rec.status = StageStatus::Done;
    Ok(rec)
}

fn cached_bit_choice(ctx: &Ctx, teacher: &TinyDecoder, teacher_digest: &str) -> Result<BitChoice> {
    let cfg = ctx.cfg;
    let key = sha_json(&json!({
        "bits": "auto", "group": cfg.init.group_size, "scheme": cfg.init.scheme, "latent": cfg.init.latent,
        "mode": cfg.init.fake_quant, "eval": cfg.eval, "teacher": teacher_digest,
    }));
    let path = cfg.output_dir.join("cache").join(format!("bits-{}.json", &key[..16]));
    if let Ok(bytes) = std::fs::read(&path) {
        if let Ok(c) = serde_json::from_slice(&bytes) {
            return Ok(c);
        }
    }
    let choice = choose_bits(teacher, &cfg.init, &ctx.curve())?;
    ctx.log(format!("adaptive bits: {:?} -> W{}", choice.probes, choice.bits));
    std::fs::create_dir_all(path.parent().unwrap())?;
    write_atomic(&path, &serde_json::to_vec_pretty(&choice)?)?;
    Ok(choice)
}

// ---------------------------------------------------------------------------
// Ablation matrix

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub id: usize,
    pub cell: String,
    pub method: PtqMethod,
    pub objective: Stage2Objective,
    pub rl: Stage3Algorithm,
    pub per_seed: Vec<(u64, f64)>,
    pub mean_accuracy: f64,
    pub manifests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<MatrixRow>,
    pub best: String,
}

impl MatrixReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| # | init | recovery | RL | mean acc | per-seed |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.per_seed.iter().map(|(s, a)| format!("{s}:{a:.3}")).collect();
            s.push_str(&format!(
                "| {} | {:?} | {:?} | {:?} | {:.4} | {} |\n",
                r.id,
                r.method,
                r.objective,
                r.rl,
                r.mean_accuracy,
                seeds.join(" ")
            ));
        }
        s.push_str(&format!("\nbest: {}\n", self.best));
        s
    }
}

/// The 8-cell {RTN, GPTQ} × {SFT, KD} × {GRPO, none} matrix. Each cell runs
/// in `<output_dir>/cells/<cell>/`; all cells share the teacher and the
/// stage cache under `<output_dir>`.
pub fn run_matrix(base: &WorkflowConfig, opts: &RunOptions) -> Result<MatrixReport> {
    base.validate()?;
    let ds = generate(&base.data)?;
    let mut rows = Vec::new();
    let mut id = 0;
    for method in [PtqMethod::Rtn, PtqMethod::Gptq] {
        for objective in [Stage2Objective::Sft, Stage2Objective::Kd] {
            for rl in [Stage3Algorithm::None, Stage3Algorithm::Grpo] {
                id += 1;
                let cell = format!(
                    "{}-{}-{}",
                    format!("{method:?}").to_lowercase(),
                    format!("{objective:?}").to_lowercase(),
                    if rl == Stage3Algorithm::Grpo { "grpo" } else { "none" }
                );
                let mut cfg = base.clone();
                cfg.init.method = method;
                cfg.stage2.objective = objective;
                cfg.stage3.algorithm = rl;
                cfg.stage3.cold_start = None;
                let cells_root = base.output_dir.join("cells").join(&cell);
                let ctx = Ctx { cfg: &cfg, ds: ds.clone(), opts };
                let manifests = cfg
                    .seeds
                    .iter()
                    .map(|&s| run_in_dir(&ctx, s, &cells_root.join(format!("seed-{s}")), None))
                    .collect::<Result<Vec<_>>>()?;
                let per_seed: Vec<(u64, f64)> = manifests
                    .iter()
                    .map(|m| (m.seed, m.final_eval().map_or(0.0, |e| e.accuracy)))
                    .collect();
                let mean_accuracy = per_seed.iter().map(|p| p.1).sum::<f64>() / per_seed.len() as f64;
                rows.push(MatrixRow {
                    id,
                    cell: cell.clone(),
                    method,
                    objective,
                    rl,
                    per_seed,
                    mean_accuracy,
                    manifests: cfg.seeds.iter().map(|s| rel(&cells_root.join(format!("seed-{s}")).join(MANIFEST), &base.output_dir)).collect(),
                });
            }
        }
    }
    let best = rows
        .iter()
        .max_by(|a, b| a.mean_accuracy.total_cmp(&b.mean_accuracy).then(b.id.cmp(&a.id)))
        .map(|r| r.cell.clone())
        .unwrap_or_default();
    let report = MatrixReport { rows, best };
    write_atomic(&base.output_dir.join("matrix.json"), &serde_json::to_vec_pretty(&report)?)?;
    write_atomic(&base.output_dir.join("matrix.md"), report.to_markdown().as_bytes())?;
    Ok(report)
}
