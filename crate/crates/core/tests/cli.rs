//! End-to-end runs of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "model.text_dim=8",
    "model.video_dim=8",
    "model.heads=2",
    "synth.text_invariant=2",
    "synth.text_spurious=2",
    "synth.video_invariant=2",
    "synth.video_spurious=2",
    "domain.src_a.n=120",
    "domain.src_b.n=120",
    "domain.tgt.n=300",
    "train.lr=0.01",
    "train.epochs=4",
];

fn seqmask(args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_seqmask"));
    cmd.args(args);
    for s in SMALL.iter().chain(extra) {
        cmd.args(["--set", s]);
    }
    cmd.output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_body(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("{e}: {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_analyze_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let run_dir = dir.path().join("run");
    ok(seqmask(&["generate", "--out", s(&data_dir)], &[]));
    let data = data_dir.join("dataset.jsonl");
    assert!(data.exists() && data_dir.join("ground_truth.json").exists());

    ok(seqmask(&["train", "--data", s(&data), "--out", s(&run_dir)], &[]));
    for f in [
        "checkpoint.json",
        "report.json",
        "config.txt",
        "text_mask.csv",
        "video_mask.csv",
        "keyframe_decisions.csv",
    ] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let ckpt = run_dir.join("checkpoint.json");
    let out = ok(seqmask(
        &["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data)],
        &[],
    ));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["source"].as_object().unwrap().len(), 2);
    assert!(v["target"]["tgt"].as_f64().is_some());
    let overall = v["overall"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&overall));

    let ana = dir.path().join("analysis");
    ok(seqmask(
        &[
            "analyze",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--truth",
            s(&data_dir.join("ground_truth.json")),
            "--out",
            s(&ana),
        ],
        &[],
    ));
    assert!(ana.join("analysis.json").exists());
}

#[test]
fn untrained_checkpoint_scores_near_chance_on_uninformative_target() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    // A big target domain whose features carry no label information keeps
    // the untrained classifier's accuracy close to one in three.
    let extra = [
        "train.epochs=0",
        "domain.tgt.n=6000",
        "domain.tgt.strength=0",
        "synth.text_weight=0",
        "synth.video_weight=0",
        "synth.confounder_scale=0",
        "synth.spurious_edge=0",
    ];
    ok(seqmask(&["generate", "--out", s(&run)], &extra));
    let data = run.join("dataset.jsonl");
    ok(seqmask(&["train", "--data", s(&data), "--out", s(&run)], &extra));
    let out = ok(seqmask(
        &[
            "evaluate",
            "--checkpoint",
            s(&run.join("checkpoint.json")),
            "--data",
            s(&data),
        ],
        &extra,
    ));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let acc = v["target_mean"].as_f64().unwrap();
    assert!((acc - 1.0 / 3.0).abs() < 0.03, "{acc}");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let files = [
        "checkpoint.json",
        "report.json",
        "text_mask.csv",
        "video_mask.csv",
        "keyframe_decisions.csv",
    ];
    ok(seqmask(&["train", "--out", s(&run)], &[]));
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(run.join(f)).unwrap()).collect();
    ok(seqmask(&["train", "--out", s(&run)], &[]));
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&std::fs::read(run.join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn several_seeds_write_subdirectories_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    ok(seqmask(
        &["train", "--seeds", "3,4", "--out", s(dir.path())],
        &["train.epochs=2"],
    ));
    assert!(dir.path().join("seed-3/checkpoint.json").exists());
    assert!(dir.path().join("seed-4/report.json").exists());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(v["target_accuracy"]["per_seed"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_configuration_exits_2_with_json_error() {
    let out = seqmask(&["generate", "--out", "/tmp/unused"], &["model.colour=red"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_body(&out);
    assert_eq!(e["error"]["code"], 2);
    assert!(e["error"]["message"].as_str().unwrap().contains("colour"));

    let out = seqmask(&["train", "--out", "/tmp/unused"], &["model.heads=3"]);
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_seqmask")).arg("fly").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_body(&out)["error"]["kind"], "usage");
}

#[test]
fn missing_input_exits_3_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqmask(
        &[
            "evaluate",
            "--checkpoint",
            s(&dir.path().join("nope.json")),
            "--data",
            s(&dir.path().join("nope.jsonl")),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_body(&out)["error"]["code"], 3);
}

#[test]
fn help_exits_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_seqmask"))
        .arg("--help")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("train"));
}
