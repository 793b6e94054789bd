//! Runs the `tsda` binary end to end on a shrunken synthetic family.

use std::path::Path;
use std::process::{Command, Output};

/// Overrides that shrink the synthetic family to a few seconds per command.
const TINY: [&str; 9] = [
    "dataset.synthetic.length=64",
    "dataset.synthetic.samples_per_class=20",
    "dataset.synthetic.class_frequencies=[3.0, 7.0, 11.0]",
    "pretrain.epochs=2",
    "pretrain.batch_size=16",
    "adapt.iterations=3",
    "adapt.batch_size=16",
    "runner.workers=1",
    "runner.seeds=[0, 1]",
];

fn tsda(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tsda"));
    cmd.env("RUST_LOG", "warn");
    for o in TINY {
        cmd.args(["--set", o]);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {stdout}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_synthetic_writes_both_domains() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&tsda(&[
        "generate-synthetic",
        "--preset",
        "small",
        "--out",
        s(dir.path()),
    ]));
    assert!(stdout.contains("60 source and 60 target samples"), "{stdout}");
    for f in ["source", "target", "synthetic.toml"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let spec = std::fs::read_to_string(dir.path().join("synthetic.toml")).unwrap();
    assert!(spec.contains("magnitude = 0.25"), "{spec}");
}

#[test]
fn pretrain_adapt_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("pretrained");
    let stdout = ok(&tsda(&["pretrain", "--seed", "4", "--out", s(&ckpt)]));
    assert!(stdout.contains("source test accuracy"), "{stdout}");
    assert!(ckpt.join("metrics.csv").exists());
    assert!(ckpt.join("config.toml").exists());

    let adapted = dir.path().join("adapted");
    let stdout = ok(&tsda(&[
        "adapt",
        "--seed",
        "4",
        "--source-ckpt",
        s(&ckpt),
        "--out",
        s(&adapted),
    ]));
    assert!(stdout.contains("target test accuracy"), "{stdout}");
    let metrics = std::fs::read_to_string(adapted.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iter,loss_d,loss_adv,loss_ca"), "{metrics}");
    assert_eq!(metrics.lines().count(), 4, "header plus one row per iteration");

    let eval_dir = dir.path().join("eval");
    let target_ckpt = adapted.join("target");
    let stdout = ok(&tsda(&[
        "evaluate",
        "--seed",
        "4",
        "--ckpt",
        s(&target_ckpt),
        "--domain",
        "target",
        "--out",
        s(&eval_dir),
    ]));
    assert!(stdout.contains("`target` test split (12 samples"), "{stdout}");
    let predictions = std::fs::read_to_string(eval_dir.join("predictions.csv")).unwrap();
    assert_eq!(predictions.lines().count(), 13);
}

#[test]
fn ablate_writes_records_that_significance_reads() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tsda(&["ablate", "--out", s(dir.path())]));
    for f in ["records.csv", "summary.json", "matrix.csv", "matrix.svg"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let records = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
    // five variants times two seeds
    assert_eq!(records.lines().count(), 11, "{records}");
    // one scenario gives too few pairs for the test
    let out = tsda(&[
        "significance",
        "--records",
        s(&dir.path().join("records.csv")),
        "--a",
        "full",
        "--b",
        "source_only",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn significance_on_hand_written_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.csv");
    let mut text =
        String::from("family,source,target,variant,seed,accuracy,macro_f1,source_accuracy,wall_seconds,config_hash\n");
    for (i, gain) in [1.0, 2.0, 3.0, 4.0, 5.0, 6.0].iter().enumerate() {
        for seed in 0..2 {
            text += &format!("har,{i},x,full,{seed},{},0,0,0,h\n", 70.0 + gain);
            text += &format!("har,{i},x,source_only,{seed},70,0,0,0,h\n");
        }
    }
    std::fs::write(&path, text).unwrap();
    let stdout = ok(&tsda(&[
        "significance",
        "--records",
        s(&path),
        "--a",
        "full",
        "--b",
        "source_only",
    ]));
    assert!(stdout.contains("6 pairs"), "{stdout}");
    assert!(stdout.contains("p = 0.031250 (exact)"), "{stdout}");
    let stdout = ok(&tsda(&[
        "significance",
        "--records",
        s(&path),
        "--a",
        "full",
        "--b",
        "source_only",
        "--per-seed",
    ]));
    assert!(stdout.contains("12 pairs"), "{stdout}");
}

#[test]
fn sweep_rejects_out_of_range_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsda(&[
        "sweep",
        "--param",
        "zeta",
        "--values",
        "0.5,1.5",
        "--out",
        s(dir.path()),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error:"), "{stderr}");
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = tsda(&[
        "evaluate",
        "--ckpt",
        s(&missing),
        "--domain",
        "target",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nowhere"), "{stderr}");
}

#[test]
fn malformed_override_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_tsda"))
        .args(["--set", "adapt.lambda", "generate-synthetic"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("adapt.lambda"));
}
