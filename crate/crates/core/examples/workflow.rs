//! A miniature end-to-end run: teacher, GPTQ init, KD recovery and GRPO,
//! with a manifest per seed. Sized to finish in seconds, so accuracies are
//! meaningless; the default config is what the experiments use.

use rqat::model::ModelConfig;
use rqat::taskgen::ArithTaskConfig;
use rqat::workflow::{run, Bits, RunOptions, WorkflowConfig};

fn main() -> rqat::Result<()> {
    let out = std::env::temp_dir().join("rqat-workflow-example");
    let mut cfg = WorkflowConfig::default();
    cfg.output_dir = out.clone();
    cfg.seeds = vec![1];
    cfg.model = ModelConfig { d_model: 32, n_layers: 2, n_heads: 2, d_ff: 64, ..Default::default() };
    cfg.data = ArithTaskConfig { n_operands: 2, n_train: 500, n_eval: 20, ..Default::default() };
    cfg.teacher.optimizer.total_steps = 100;
    cfg.teacher.eval_every = 50;
    cfg.init.bits = Bits::Fixed(2);
    cfg.init.group_size = 32;
    cfg.init.calib_tokens = 512;
    cfg.stage2.optimizer.total_steps = 30;
    cfg.stage2.optimizer.warmup_steps = 5;
    cfg.stage3.optimizer.total_steps = 5;
    cfg.stage3.optimizer.warmup_steps = 1;
    cfg.stage3.sampler.max_new_tokens = 24;
    cfg.eval.curve_problems = 20;
    println!("{}", cfg.to_toml()?);

    let manifests = run(&cfg, &RunOptions { verbose: true, ..Default::default() })?;
    for s in &manifests[0].stages {
        println!("{:<9} {:?} acc {:?}", s.name, s.status, s.eval.as_ref().map(|e| e.accuracy));
    }
    println!("manifest: {}", out.join("seed-1").join("manifest.json").display());
    Ok(())
}
