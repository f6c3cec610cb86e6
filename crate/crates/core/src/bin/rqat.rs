use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rqat::autodiff::FakeQuantMode;
use rqat::eval::{evaluate, plot, StageKind};
use rqat::model::{ModelConfig, SamplerConfig, TinyDecoder};
use rqat::objectives::{GrpoConfig, OptimizerConfig};
use rqat::packing::{load_checkpoint, save_checkpoint, Checkpoint, TensorData};
use rqat::ptq::LatentMode;
use rqat::quant::{QuantSpec, Scheme};
use rqat::taskgen::{self, ArithTaskConfig, CalibKind, Operator};
use rqat::workflow::{self, CurveEval, PtqMethod, RlRun, RunManifest, RunOptions, SupervisedRun, WorkflowConfig};
use rqat::{Error, Result};

#[derive(Parser)]
#[command(name = "rqat", version, about = "Quantization-aware training workbench for small reasoning models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the arithmetic dataset splits as JSONL files.
    GenData(GenData),
    /// Train the full-precision teacher with SFT.
    TrainTeacher(TrainTeacher),
    /// Build a calibration set.
    Calibrate(Calibrate),
    /// Post-training quantization of a full-precision checkpoint.
    Ptq(Ptq),
    /// QAT recovery with SFT or KD.
    Train(Train),
    /// GRPO on a quantized checkpoint.
    Rl(Rl),
    /// Evaluate a checkpoint.
    Eval(Eval),
    /// Run the staged pipeline from a TOML config.
    RunWorkflow(RunWorkflow),
    /// Store a quantized model with packed integer codes.
    Pack(Pack),
    /// Print the manifest of a checkpoint or run.
    Inspect(Inspect),
    /// Plot metrics files to SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 4)]
    operands: usize,
    #[arg(long, default_value_t = 0)]
    lo: i64,
    #[arg(long, default_value_t = 9)]
    hi: i64,
    /// Operators, e.g. "+-" or "+-*".
    #[arg(long, default_value = "+-")]
    ops: String,
    #[arg(long, default_value_t = 20_000)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_eval: usize,
    #[arg(long, default_value_t = 256)]
    n_calib: usize,
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    warmup: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    grad_accum: usize,
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
}

impl TrainOpts {
    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            peak_lr: self.lr,
            warmup_steps: self.warmup.min(self.steps),
            global_batch: self.batch,
            grad_accum: self.grad_accum,
            total_steps: self.steps,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct TrainTeacher {
    #[command(flatten)]
    common: Common,
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
}

#[derive(Args)]
struct Calibrate {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "in-domain")]
    calib: String,
    #[arg(long, default_value_t = 4096)]
    tokens: usize,
}

#[derive(Args)]
struct Ptq {
    #[command(flatten)]
    common: Common,
    /// Full-precision checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "gptq")]
    method: String,
    #[arg(long, default_value_t = 3)]
    bits: u8,
    #[arg(long, default_value_t = 128)]
    group: usize,
    /// symmetric or asymmetric; defaults to the method's scheme.
    #[arg(long)]
    scheme: Option<String>,
    /// Calibration file from `calibrate` (required for gptq).
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    percdamp: f64,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    objective: String,
    /// Quantized starting checkpoint.
    #[arg(long)]
    init: PathBuf,
    /// Teacher checkpoint (kd only).
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    kd_temperature: f64,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    train: TrainOpts,
    /// Append metric records here.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct Rl {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    group_size: usize,
    #[arg(long, default_value_t = 4)]
    batch_prompts: usize,
    #[arg(long, default_value_t = 250)]
    steps: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    kl_coef: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Allow RL directly on a PTQ checkpoint without KD/SFT recovery.
    #[arg(long)]
    allow_zero_rl: bool,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Seed count (`3` means 0,1,2) or a comma list.
    #[arg(long, default_value = "1")]
    seeds: String,
    #[arg(long, default_value_t = 0.6)]
    temperature: f64,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
    #[arg(long, default_value_t = 1)]
    samples_per_problem: usize,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunWorkflow {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    matrix: bool,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct Pack {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Inspect {
    path: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long, num_args = 1.., required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "eval_accuracy")]
    keys: Vec<String>,
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rqat: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::TrainTeacher(a) => train_teacher(a),
        Cmd::Calibrate(a) => calibrate(a),
        Cmd::Ptq(a) => ptq(a),
        Cmd::Train(a) => train(a),
        Cmd::Rl(a) => rl(a),
        Cmd::Eval(a) => eval(a),
        Cmd::RunWorkflow(a) => run_workflow(a),
        Cmd::Pack(a) => pack(a),
        Cmd::Inspect(a) => inspect(a),
        Cmd::Plot(a) => plot_cmd(a),
    }
}

/// Resolved arguments written next to an output file.
fn echo(out: &Path, command: &str, args: serde_json::Value) -> Result<()> {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    let path = out.with_file_name(name);
    let record = json!({
        "command": command,
        "args": args,
        "code_version": workflow::CODE_VERSION,
        "code_hash": workflow::code_hash(),
    });
    std::fs::write(path, serde_json::to_vec_pretty(&record)?)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(TinyDecoder, Checkpoint)> {
    let ck = load_checkpoint(path)?;
    Ok((TinyDecoder::from_checkpoint(&ck)?, ck))
}

fn save_model(path: &Path, ck: &mut Checkpoint, stage: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    ck.meta.insert("stage".into(), json!(stage));
    save_checkpoint(path, ck)
}

fn gen_data(a: GenData) -> Result<()> {
    let operators = a
        .ops
        .chars()
        .map(|c| match c {
            '+' => Ok(Operator::Add),
            '-' => Ok(Operator::Sub),
            '*' => Ok(Operator::Mul),
            _ => Err(Error::config(format!("unknown operator '{c}'"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = ArithTaskConfig {
        n_operands: a.operands,
        operand_range: [a.lo, a.hi],
        operators,
        n_train: a.n_train,
        n_eval: a.n_eval,
        n_calib: a.n_calib,
        seed: a.common.seed,
        max_seq_len: 128,
    };
    let ds = taskgen::generate(&cfg)?;
    taskgen::save_dataset(&a.common.out, &ds)?;
    std::fs::write(a.common.out.join("task.json"), serde_json::to_vec_pretty(&cfg)?)?;
    println!("wrote {} / {} / {} examples to {}", ds.train.len(), ds.eval.len(), ds.calib.len(), a.common.out.display());
    Ok(())
}

fn load_task(dir: &Path) -> Result<(taskgen::Dataset, ArithTaskConfig)> {
    let ds = taskgen::load_dataset(dir)?;
    let cfg = match std::fs::read(dir.join("task.json")) {
        Ok(b) => serde_json::from_slice(&b)?,
        Err(_) => ArithTaskConfig::default(),
    };
    Ok((ds, cfg))
}

fn curve<'a>(ds: &'a taskgen::Dataset, every: usize) -> Option<CurveEval<'a>> {
    (every > 0).then(|| CurveEval {
        problems: &ds.eval[..ds.eval.len().min(100)],
        sampler: SamplerConfig::default(),
        seed: 0,
        every,
    })
}

fn train_teacher(a: TrainTeacher) -> Result<()> {
    let (ds, _) = load_task(&a.data)?;
    let cfg = ModelConfig { d_model: a.d_model, n_layers: a.layers, n_heads: a.heads, d_ff: a.d_ff, ..Default::default() };
    let mut model = TinyDecoder::new(cfg, a.common.seed)?;
    let opt = a.train.optimizer();
    let run = SupervisedRun {
        stage: StageKind::Teacher,
        teacher: None,
        kd_temperature: 1.0,
        train: &ds.train,
        opt: &opt,
        seed: a.common.seed,
        curve: curve(&ds, a.train.eval_every),
        metrics: None,
        state: None,
        halt_at: None,
    };
    workflow::train_supervised(&mut model, &run, None)?;
    save_model(&a.common.out, &mut model.to_checkpoint()?, "teacher")?;
    echo(&a.common.out, "train-teacher", json!({"seed": a.common.seed, "optimizer": opt, "model": model.config}))?;
    println!("saved teacher to {}", a.common.out.display());
    Ok(())
}

fn calibrate(a: Calibrate) -> Result<()> {
    let (ds, task) = load_task(&a.data)?;
    let kind: CalibKind = a.calib.parse()?;
    let seqs = taskgen::make_calibration(kind, a.tokens, a.common.seed, &task, &ds)?;
    let mut ck = Checkpoint::new();
    ck.meta.insert("calibration".into(), json!({"kind": kind, "tokens": a.tokens, "seed": a.common.seed}));
    for (i, s) in seqs.iter().enumerate() {
        ck.push(format!("calib/{i:05}"), TensorData::dense(vec![s.len()], s.iter().map(|&t| t as f64).collect()));
    }
    save_model(&a.common.out, &mut ck, "calibration")?;
    println!("wrote {} sequences ({} tokens) to {}", seqs.len(), a.tokens, a.common.out.display());
    Ok(())
}

fn read_calibration(path: &Path) -> Result<Vec<Vec<u32>>> {
    let ck = load_checkpoint(path)?;
    ck.tensors
        .iter()
        .filter(|(n, _)| n.starts_with("calib/"))
        .map(|(n, t)| match t {
            TensorData::Dense { data, .. } => Ok(data.iter().map(|&v| v as u32).collect()),
            TensorData::Quantized(_) => Err(Error::format(format!("calibration tensor '{n}' is not dense"))),
        })
        .collect()
}

fn ptq(a: Ptq) -> Result<()> {
    let (teacher, _) = load_model(&a.model)?;
    let method: PtqMethod = a.method.parse()?;
    let scheme = match a.scheme.as_deref() {
        None => method.default_scheme(),
        Some("symmetric") => Scheme::Symmetric,
        Some("asymmetric") => Scheme::Asymmetric,
        Some(s) => return Err(Error::config(format!("unknown scheme '{s}'"))),
    };
    let spec = QuantSpec::grouped(a.bits, a.group, scheme)?;
    let calib = match (&a.calib, method) {
        (Some(p), _) => read_calibration(p)?,
        (None, PtqMethod::Gptq) => return Err(Error::config("gptq needs --calib")),
        (None, PtqMethod::Rtn) => Vec::new(),
    };
    let (student, proxy) =
        workflow::ptq_init(&teacher, method, &spec, &calib, a.percdamp, LatentMode::Dequantized, FakeQuantMode::DynamicMinmax)?;
    let mut ck = student.to_packed_checkpoint()?;
    ck.meta.insert("proxy_loss".into(), json!(proxy));
    save_model(&a.common.out, &mut ck, "ptq")?;
    echo(&a.common.out, "ptq", json!({"method": a.method, "spec": spec, "percdamp": a.percdamp, "seed": a.common.seed}))?;
    println!("{} W{}G{}: proxy loss {proxy:.4}, saved to {}", a.method, a.bits, a.group, a.common.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let (ds, _) = load_task(&a.data)?;
    let (mut model, _) = load_model(&a.init)?;
    let (teacher, stage) = match a.objective.as_str() {
        "kd" => {
            let p = a.teacher.as_ref().ok_or_else(|| Error::config("--objective kd needs --teacher"))?;
            (Some(load_model(p)?.0), StageKind::Kd)
        }
        "sft" => (None, StageKind::Sft),
        o => return Err(Error::config(format!("unknown objective '{o}'"))),
    };
    let opt = a.train.optimizer();
    let run = SupervisedRun {
        stage,
        teacher: teacher.as_ref(),
        kd_temperature: a.kd_temperature,
        train: &ds.train,
        opt: &opt,
        seed: a.common.seed,
        curve: curve(&ds, a.train.eval_every),
        metrics: a.metrics.as_deref(),
        state: None,
        halt_at: None,
    };
    workflow::train_supervised(&mut model, &run, None)?;
    save_model(&a.common.out, &mut model.to_checkpoint()?, &a.objective)?;
    echo(&a.common.out, "train", json!({"objective": a.objective, "kd_temperature": a.kd_temperature, "optimizer": opt, "seed": a.common.seed}))?;
    println!("saved {} model to {}", a.objective, a.common.out.display());
    Ok(())
}

fn rl(a: Rl) -> Result<()> {
    let (mut model, ck) = load_model(&a.init)?;
    let stage = ck.meta.get("stage").and_then(|v| v.as_str()).unwrap_or("unknown").to_string();
    if stage == "ptq" && !a.allow_zero_rl {
        return Err(Error::config(
            "cold start required: this checkpoint comes straight from PTQ; recover it with `train` (kd or sft) \
             first, or pass --allow-zero-rl to run zero-RL",
        ));
    }
    let (ds, _) = load_task(&a.data)?;
    let cfg = GrpoConfig { group_size: a.group_size, batch_prompts: a.batch_prompts, kl_coef: a.kl_coef, ..Default::default() };
    let opt = OptimizerConfig {
        peak_lr: a.lr,
        warmup_steps: 10.min(a.steps),
        global_batch: a.group_size * a.batch_prompts,
        total_steps: a.steps,
        ..Default::default()
    };
    let sampler = SamplerConfig { temperature: a.temperature, top_p: 1.0, max_new_tokens: 64, seed: a.common.seed };
    let reference = (a.kl_coef > 0.0).then(|| model.clone());
    let run = RlRun {
        train: &ds.train,
        cfg: &cfg,
        opt: &opt,
        sampler: &sampler,
        reference: reference.as_ref(),
        seed: a.common.seed,
        curve: None,
        metrics: a.metrics.as_deref(),
        state: None,
        halt_at: None,
    };
    workflow::train_rl(&mut model, &run, None)?;
    save_model(&a.common.out, &mut model.to_checkpoint()?, "rl")?;
    echo(&a.common.out, "rl", json!({"grpo": cfg, "optimizer": opt, "sampler": sampler, "init_stage": stage}))?;
    println!("saved RL model to {}", a.common.out.display());
    Ok(())
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if s.contains(',') {
        s.split(',').map(|x| x.trim().parse().map_err(|_| Error::config(format!("bad seed '{x}'")))).collect()
    } else {
        let n: u64 = s.parse().map_err(|_| Error::config(format!("bad seed count '{s}'")))?;
        if n == 0 {
            return Err(Error::config("--seeds must be positive"));
        }
        Ok((0..n).collect())
    }
}

fn eval(a: Eval) -> Result<()> {
    let (model, _) = load_model(&a.model)?;
    let (ds, _) = load_task(&a.data)?;
    let seeds = parse_seeds(&a.seeds)?;
    let sampler = SamplerConfig { temperature: a.temperature, top_p: a.top_p, max_new_tokens: a.max_new_tokens, seed: 0 };
    let report = evaluate(&model, &ds.eval, &sampler, &seeds, a.samples_per_problem)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out, format!("{text}\n"))?;
        echo(out, "eval", json!({"sampler": sampler, "seeds": seeds, "samples_per_problem": a.samples_per_problem}))?;
    }
    Ok(())
}

fn run_workflow(a: RunWorkflow) -> Result<()> {
    let opts = RunOptions { verbose: a.verbose, ..Default::default() };
    if let Some(m) = &a.resume {
        let manifest = workflow::resume(m, &opts)?;
        println!("{}", summary(&manifest));
        return Ok(());
    }
    let path = a.config.as_ref().ok_or_else(|| Error::config("run-workflow needs --config or --resume"))?;
    let mut cfg = WorkflowConfig::load(path)?;
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    if a.matrix {
        let report = workflow::run_matrix(&cfg, &opts)?;
        print!("{}", report.to_markdown());
    } else {
        for m in workflow::run(&cfg, &opts)? {
            println!("{}", summary(&m));
        }
    }
    Ok(())
}

fn summary(m: &RunManifest) -> String {
    let stages: Vec<String> = m
        .stages
        .iter()
        .map(|s| match &s.eval {
            Some(e) => format!("{}={:.3}", s.name, e.accuracy),
            None => format!("{}:{:?}", s.name, s.status).to_lowercase(),
        })
        .collect();
    format!("seed {}: {}", m.seed, stages.join(" "))
}

fn pack(a: Pack) -> Result<()> {
    let (model, _) = load_model(&a.model)?;
    let mut ck = model.to_packed_checkpoint()?;
    save_model(&a.out, &mut ck, "packed")?;
    let before = std::fs::metadata(&a.model)?.len();
    let after = std::fs::metadata(&a.out)?.len();
    println!("packed {} ({before} bytes) into {} ({after} bytes)", a.model.display(), a.out.display());
    Ok(())
}

fn inspect(a: Inspect) -> Result<()> {
    let bytes = std::fs::read(&a.path)?;
    if bytes.starts_with(rqat::packing::MAGIC) {
        let ck = Checkpoint::from_bytes(&bytes)?;
        println!("{}", serde_json::to_string_pretty(&ck.manifest()?)?);
    } else {
        let m: RunManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(format!("not a checkpoint or run manifest: {e}")))?;
        println!("{}", serde_json::to_string_pretty(&m)?);
    }
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    let stage = match a.stage.as_deref() {
        None => None,
        Some(s) => Some(
            serde_json::from_value::<StageKind>(json!(s)).map_err(|_| Error::config(format!("unknown stage '{s}'")))?,
        ),
    };
    let summary = plot(&a.metrics, &a.keys, stage, &a.out)?;
    for (label, n) in summary.series {
        println!("{label}: {n} points");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
