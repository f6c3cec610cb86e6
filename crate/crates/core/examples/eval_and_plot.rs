//! Evaluates a model over several sampling seeds, logs curve records, and
//! renders them to SVG.

use rqat::eval::{evaluate, log_metrics, plot, MetricRecord, StageKind};
use rqat::model::{ModelConfig, SamplerConfig, TinyDecoder};
use rqat::taskgen::{generate, ArithTaskConfig};

fn main() -> rqat::Result<()> {
    let ds = generate(&ArithTaskConfig { n_train: 10, n_eval: 16, n_calib: 1, ..Default::default() })?;
    let model = TinyDecoder::new(ModelConfig::default(), 3)?;
    let sampler = SamplerConfig { max_new_tokens: 20, ..Default::default() };
    let report = evaluate(&model, &ds.eval, &sampler, &[0, 1, 2], 1)?;
    println!("{}", serde_json::to_string_pretty(&report)?);

    let dir = std::env::temp_dir().join("rqat-plot-example");
    std::fs::create_dir_all(&dir)?;
    let metrics = dir.join("metrics.jsonl");
    let _ = std::fs::remove_file(&metrics);
    for step in 0..20u64 {
        let mut rec = MetricRecord::new(StageKind::Kd, step);
        rec.loss = Some(3.0 / (1.0 + step as f64));
        log_metrics(&metrics, &rec)?;
    }
    let svg = dir.join("loss.svg");
    let summary = plot(&[metrics], &["loss".into()], None, &svg)?;
    println!("{:?} -> {}", summary.series, svg.display());
    Ok(())
}
