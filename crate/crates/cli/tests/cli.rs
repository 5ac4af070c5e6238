use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pquant"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn footprint_reports_csv_and_effective_bits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("desk_1b.cfg");
    let out = ok(&["footprint", "--config", s(&cfg), "--out", s(dir.path())]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("effective bits"));
    let csv = std::fs::read_to_string(dir.path().join("footprint.csv")).unwrap();
    assert!(csv.starts_with("component,resident_bytes,decode_bytes\n"));
    let total: f64 = csv.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((total / 0.98e9 - 1.0).abs() < 0.1);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn zero_step_training_writes_initialization_and_header_only_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("tiny.cfg");
    let args = ["train", "--config", s(&cfg), "--steps", "0", "--corpus-bytes", "20000", "--out", s(dir.path())];
    ok(&args);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics, "step,loss,lr,wd,branch_util_0,grad_norm\n");
    let ckpt = pquant::training::Checkpoint::load(&dir.path().join("checkpoint.pqtc")).unwrap();
    let init = pquant::model::Transformer::init(&ckpt.model.cfg, 0).unwrap();
    assert!(ckpt.model.params().iter().zip(init.params()).all(|(a, b)| a.data == b.data));
    let first = std::fs::read(dir.path().join("manifest.json")).unwrap();
    ok(&args);
    assert_eq!(std::fs::read(dir.path().join("manifest.json")).unwrap(), first);
}

#[test]
fn train_export_generate_sensitivity_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = configs().join("tiny.cfg");
    let train_dir = d.join("train");
    ok(&[
        "train", "--config", s(&cfg), "--steps", "6", "--set", "train.warmup_steps=1", "--set", "train.batch_tokens=128",
        "--set", "model.n_branches=2", "--corpus-bytes", "20000", "--out", s(&train_dir),
    ]);
    let metrics = std::fs::read_to_string(train_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 7);
    assert!(metrics.starts_with("step,loss,lr,wd,branch_util_0,branch_util_1,grad_norm\n"));

    let ckpt = train_dir.join("checkpoint.pqtc");
    let export_dir = d.join("export");
    ok(&["export", "--checkpoint", s(&ckpt), "--out", s(&export_dir)]);
    let model = export_dir.join("model.pqtm");
    assert_eq!(&std::fs::read(&model).unwrap()[..4], b"PQTM");

    let gen_dir = d.join("gen");
    let a = ok(&["generate", "--model", s(&model), "--prompt", "the ", "--tokens", "16", "--out", s(&gen_dir)]);
    let b = ok(&["generate", "--model", s(&model), "--prompt", "the ", "--tokens", "16", "--out", s(&gen_dir)]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8(a.stdout).unwrap().trim_end_matches('\n').len(), 20);

    let sens_dir = d.join("sens");
    ok(&[
        "sensitivity", "--checkpoint", s(&ckpt), "--layer", "ffn.last", "--pool", "16", "--windows", "2", "--corpus-bytes", "20000",
        "--out", s(&sens_dir),
    ]);
    for stem in ["blocks.1.ffn.hp.0.up", "blocks.1.ffn.hp.1.up", "blocks.1.ffn.bit_up"] {
        let pgm = std::fs::read(sens_dir.join(format!("{stem}.pgm"))).unwrap();
        let (w, h, px) = pquant::sensitivity::parse_pgm(&pgm).unwrap();
        assert_eq!(w * h, px.len());
        assert_eq!(w, 4);
        let csv = std::fs::read_to_string(sens_dir.join(format!("{stem}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), w * h + 1);
    }
}

#[test]
fn bench_gates_and_reports_every_kernel() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["bench", "--sizes", "16x64,8x33", "--reps", "3", "--out", s(dir.path())]);
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["footprint", "--config", "/nonexistent.cfg", "--out", out]).status.code(), Some(3));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "[model]\nd_model = 10\nn_heads = 3\n").unwrap();
    assert_eq!(run(&["footprint", "--config", s(&bad), "--out", out]).status.code(), Some(3));
    assert_eq!(run(&["export", "--checkpoint", "/nonexistent.pqtc", "--out", out]).status.code(), Some(5));
    let cfg = configs().join("tiny.cfg");
    assert_eq!(run(&["train", "--config", s(&cfg), "--set", "model.colour=1", "--out", out]).status.code(), Some(3));
    let diverge = [
        "train", "--config", s(&cfg), "--steps", "30", "--set", "train.warmup_steps=1", "--set", "train.batch_tokens=64",
        "--set", "train.peak_lr=1e30", "--set", "train.phase1_end_lr=1e29", "--set", "train.phase2_start_lr=1e28",
        "--set", "train.final_lr=1e27", "--set", "train.grad_clip=0.0", "--corpus-bytes", "20000", "--out", out,
    ];
    assert_eq!(run(&diverge).status.code(), Some(4));
}
