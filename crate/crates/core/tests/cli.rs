use std::path::Path;
use std::process::{Command, Output};

fn rqat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rqat")).args(args).output().expect("spawn rqat")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

const TINY_MODEL: &[&str] = &["--d-model", "16", "--layers", "1", "--heads", "2", "--d-ff", "32"];

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(code(&rqat(&["--help"])), 0);
    assert_eq!(code(&rqat(&["eval", "--no-such-flag"])), 1);
    assert_eq!(code(&rqat(&["frobnicate"])), 1);
    assert_eq!(code(&rqat(&[])), 1);
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = p(dir.path(), "bad.ckpt");
    std::fs::write(&bad, b"RQAT garbage").unwrap();
    let o = rqat(&["inspect", &bad]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = p(d, "data");
    let o = rqat(&["gen-data", "--out", &data, "--operands", "2", "--n-train", "40", "--n-eval", "6", "--n-calib", "6"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(&data).join("train.jsonl").exists());

    let teacher = p(d, "teacher.ckpt");
    let mut args = vec!["train-teacher", "--data", &data, "--out", &teacher, "--steps", "3", "--batch", "4", "--warmup", "1"];
    args.extend_from_slice(TINY_MODEL);
    let o = rqat(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(&p(d, "teacher.ckpt.run.json")).exists());

    let calib = p(d, "calib.ckpt");
    assert_eq!(code(&rqat(&["calibrate", "--data", &data, "--out", &calib, "--tokens", "64"])), 0);

    let init = p(d, "init.ckpt");
    let o = rqat(&["ptq", "--model", &teacher, "--out", &init, "--method", "gptq", "--bits", "2", "--group", "16", "--calib", &calib]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // gptq without calibration data is a configuration error
    assert_eq!(code(&rqat(&["ptq", "--model", &teacher, "--out", &init, "--method", "gptq", "--group", "16"])), 1);

    // RL straight from PTQ needs the explicit zero-RL flag
    let rl_out = p(d, "rl.ckpt");
    let rl_args = ["rl", "--init", &init, "--data", &data, "--out", &rl_out, "--steps", "1", "--group-size", "2", "--batch-prompts", "1"];
    let o = rqat(&rl_args);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("cold start"));
    let mut zero = rl_args.to_vec();
    zero.push("--allow-zero-rl");
    assert_eq!(code(&rqat(&zero)), 0);

    let kd = p(d, "kd.ckpt");
    let metrics = p(d, "kd.jsonl");
    let o = rqat(&[
        "train", "--objective", "kd", "--init", &init, "--teacher", &teacher, "--data", &data, "--out", &kd, "--steps", "2",
        "--batch", "4", "--warmup", "1", "--metrics", &metrics,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&rqat(&["train", "--objective", "kd", "--init", &init, "--data", &data, "--out", &kd])), 1);
    assert_eq!(code(&rqat(&["rl", "--init", &kd, "--data", &data, "--out", &rl_out, "--steps", "1", "--group-size", "2"])), 0);

    let report = p(d, "report.json");
    let o = rqat(&["eval", "--model", &kd, "--data", &data, "--seeds", "2", "--max-new-tokens", "12", "--out", &report]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["seeds"], serde_json::json!([0, 1]));

    let packed = p(d, "packed.ckpt");
    assert_eq!(code(&rqat(&["pack", "--model", &kd, "--out", &packed])), 0);
    assert!(std::fs::metadata(&packed).unwrap().len() < std::fs::metadata(&kd).unwrap().len());
    let o = rqat(&["inspect", &packed]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("quantized"));

    let svg = p(d, "loss.svg");
    assert_eq!(code(&rqat(&["plot", "--metrics", &metrics, "--keys", "loss", "--out", &svg])), 0);
    let empty = p(d, "empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&rqat(&["plot", "--metrics", &empty, "--out", &svg])), 1);
}
