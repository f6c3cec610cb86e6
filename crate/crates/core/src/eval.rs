//! Evaluation, line-delimited metric logs and SVG curves.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SamplerConfig, TinyDecoder};
use crate::objectives::{derive_seed, verify_answer};
use crate::taskgen::Example;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub mean_response_length: f64,
    pub mean_token_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_response_length: f64,
    pub mean_token_entropy: f64,
    pub n_problems: usize,
    pub per_seed: Vec<SeedResult>,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    fn from_seeds(per_seed: Vec<SeedResult>, n_problems: usize) -> Self {
        let n = per_seed.len() as f64;
        let mean = |f: fn(&SeedResult) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
        Self {
            accuracy: mean(|s| s.accuracy),
            mean_response_length: mean(|s| s.mean_response_length),
            mean_token_entropy: mean(|s| s.mean_token_entropy),
            n_problems,
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            per_seed,
        }
    }
}

/// Batch size used when sampling eval responses.
const EVAL_CHUNK: usize = 64;

/// Samples `samples_per_problem` responses per problem for each seed and
/// scores them with [`verify_answer`].
pub fn evaluate(
    model: &TinyDecoder,
    problems: &[Example],
    sampler: &SamplerConfig,
    seeds: &[u64],
    samples_per_problem: usize,
) -> Result<EvalReport> {
    if problems.is_empty() {
        return Err(Error::domain("eval set is empty"));
    }
    if seeds.is_empty() || samples_per_problem == 0 {
        return Err(Error::config("evaluation needs at least one seed and one sample per problem"));
    }
    sampler.validate()?;
    let w = model.inference_weights()?;
    let prompts: Vec<Vec<u32>> = problems.iter().map(Example::prompt_ids).collect();
    let jobs: Vec<(usize, u64)> = (0..problems.len())
        .flat_map(|i| (0..samples_per_problem as u64).map(move |k| (i, k)))
        .collect();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (mut correct, mut len, mut ent, mut ent_n) = (0.0, 0usize, 0.0, 0usize);
        for chunk in jobs.chunks(EVAL_CHUNK) {
            let refs: Vec<&[u32]> = chunk.iter().map(|&(i, _)| prompts[i].as_slice()).collect();
            let s: Vec<u64> =
                chunk.iter().map(|&(i, k)| derive_seed(seed, i as u64 * samples_per_problem as u64 + k)).collect();
            for (out, &(i, _)) in model.sample_batch(&w, &refs, sampler, &s)?.iter().zip(chunk) {
                correct += verify_answer(&out.ids, problems[i].answer);
                len += out.ids.len();
                ent += out.entropies.iter().sum::<f64>();
                ent_n += out.entropies.len();
            }
        }
        let n = jobs.len() as f64;
        per_seed.push(SeedResult {
            seed,
            accuracy: correct / n,
            mean_response_length: len as f64 / n,
            mean_token_entropy: if ent_n > 0 { ent / ent_n as f64 } else { 0.0 },
        });
    }
    Ok(EvalReport::from_seeds(per_seed, problems.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Teacher,
    Ptq,
    Sft,
    Kd,
    Rl,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub stage: StageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

impl MetricRecord {
    pub fn new(stage: StageKind, step: u64) -> Self {
        Self {
            step,
            stage,
            loss: None,
            reward_mean: None,
            eval_accuracy: None,
            mean_length: None,
            entropy: None,
            lr: None,
            wall_clock_s: None,
        }
    }

    /// Value of a metric by its field name.
    pub fn get(&self, key: &str) -> Option<f64> {
        match key {
            "step" => Some(self.step as f64),
            "loss" => self.loss,
            "reward_mean" => self.reward_mean,
            "eval_accuracy" => self.eval_accuracy,
            "mean_length" => self.mean_length,
            "entropy" => self.entropy,
            "lr" => self.lr,
            "wall_clock_s" => self.wall_clock_s,
            _ => None,
        }
    }
}

const METRIC_KEYS: [&str; 7] = ["loss", "reward_mean", "eval_accuracy", "mean_length", "entropy", "lr", "wall_clock_s"];

pub fn log_metrics(path: impl AsRef<Path>, record: &MetricRecord) -> Result<()> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&line)?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}

/// Series actually drawn by [`plot`], for callers that check completeness.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSummary {
    pub series: Vec<(String, usize)>,
}

/// Line chart of `keys` against step, one series per file and key, labelled
/// by file stem. `stage` restricts records to one stage.
pub fn plot(files: &[PathBuf], keys: &[String], stage: Option<StageKind>, out: impl AsRef<Path>) -> Result<PlotSummary> {
    if files.is_empty() || keys.is_empty() {
        return Err(Error::domain("plot needs at least one metrics file and one key"));
    }
    if let Some(k) = keys.iter().find(|k| !METRIC_KEYS.contains(&k.as_str())) {
        return Err(Error::domain(format!("unknown metric key '{k}'")));
    }
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for f in files {
        let records = read_metrics(f)?;
        if records.is_empty() {
            return Err(Error::domain(format!("no records in {}", f.display())));
        }
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for key in keys {
            let pts: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| stage.is_none_or(|s| r.stage == s))
                .filter_map(|r| r.get(key).map(|v| (r.step as f64, v)))
                .collect();
            let label = if keys.len() == 1 { stem.clone() } else { format!("{stem}:{key}") };
            series.push((label, pts));
        }
    }
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(Error::domain("no records carry the requested keys"));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(out.as_ref(), (800, 500)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))?;
        chart.configure_mesh().x_desc("step").y_desc(keys.join(", ")).draw()?;
        for (i, (label, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
                .label(label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(PlotSummary { series: series.into_iter().map(|(l, p)| (l, p.len())).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::taskgen::{generate, ArithTaskConfig};

    #[test]
    fn untrained_model_scores_zero_and_means_are_exact() {
        let m = TinyDecoder::new(ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, ..Default::default() }, 1).unwrap();
        let ds = generate(&ArithTaskConfig { n_train: 10, n_eval: 5, n_calib: 0, ..Default::default() }).unwrap();
        let s = SamplerConfig { max_new_tokens: 8, ..Default::default() };
        let r = evaluate(&m, &ds.eval, &s, &[1, 2, 3], 1).unwrap();
        assert_eq!(r.per_seed.len(), 3);
        let a: f64 = r.per_seed.iter().map(|s| s.accuracy).sum();
        assert_eq!(r.accuracy, a / 3.0);
        assert!(r.accuracy <= 1.0);
        assert!(evaluate(&m, &[], &s, &[1], 1).is_err());
    }

    #[test]
    fn metrics_roundtrip_plot_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("run_a.jsonl"), dir.path().join("run_b.jsonl"));
        for (p, n) in [(&a, 5u64), (&b, 7)] {
            for step in 0..n {
                let mut r = MetricRecord::new(StageKind::Kd, step * 10);
                r.eval_accuracy = Some(step as f64 / n as f64);
                log_metrics(p, &r).unwrap();
            }
        }
        let recs = read_metrics(&a).unwrap();
        assert_eq!(recs.len(), 5);
        let line = std::fs::read_to_string(&a).unwrap();
        assert!(!line.contains("loss"), "absent metrics are omitted");

        let svg = dir.path().join("acc.svg");
        let s = plot(&[a.clone(), b.clone()], &["eval_accuracy".into()], None, &svg).unwrap();
        assert_eq!(s.series, vec![("run_a".to_string(), 5), ("run_b".to_string(), 7)]);
        let text = std::fs::read_to_string(&svg).unwrap();
        assert!(text.contains("run_a") && text.contains("<svg"));

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(plot(&[empty], &["loss".into()], None, &svg).unwrap_err().to_string().contains("no records"));

        std::fs::write(&b, "{\"step\":0,\"stage\":\"kd\"}\n{broken\n").unwrap();
        assert!(matches!(read_metrics(&b), Err(Error::Parse { line: 2, .. })));
    }
}
