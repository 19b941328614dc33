//! End-to-end checks of the command-line interface: exit codes, lock-file
//! replay, and artifact determinism at a tiny scale.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_resinsort"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cli(args, &[]);
    assert!(
        out.status.success(),
        "cli {:?} failed\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(code(&cli(&["synth", "--classes", "0"], &[])), 2);
    assert_eq!(code(&cli(&["synth", "--per-class", "2"], &[])), 2);
    assert_eq!(code(&cli(&["train"], &[])), 2, "--data is required");
    assert_eq!(code(&cli(&["frobnicate"], &[])), 2);
    assert_eq!(
        code(&cli(
            &[
                "eval",
                "--data",
                "x",
                "--manifest",
                "y",
                "--checkpoint",
                "z",
                "--protocol",
                "sideways"
            ],
            &[]
        )),
        2
    );
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(
        &[
            "eval",
            "--data",
            &s(dir.path()),
            "--manifest",
            &s(&dir.path().join("missing.json")),
            "--checkpoint",
            &s(&dir.path().join("missing.rsrt")),
            "--out",
            &s(&dir.path().join("eval")),
        ],
        &[],
    );
    assert_eq!(code(&out), 3);
    let out = cli(
        &[
            "train",
            "--data",
            &s(&dir.path().join("nowhere")),
            "--out",
            &s(&dir.path().join("run")),
        ],
        &[],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn invalid_thread_env_exits_with_2() {
    assert_eq!(
        code(&cli(&["synth", "--help"], &[("RESINSORT_THREADS", "zero")])),
        2
    );
    let dir = tempfile::tempdir().unwrap();
    let out = cli(
        &[
            "synth",
            "--classes",
            "2",
            "--per-class",
            "4",
            "--out",
            &s(&dir.path().join("d")),
        ],
        &[("RESINSORT_THREADS", "1")],
    );
    assert!(out.status.success());
}

#[test]
fn synth_is_deterministic_and_replayable_from_lock() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d1");
    ok(&[
        "synth",
        "--classes",
        "2",
        "--per-class",
        "5",
        "--seed",
        "3",
        "--out",
        &s(&data),
    ]);
    let manifest_before = fs::read(data.join("manifest.json")).unwrap();
    let sample_before = fs::read(data.join("c0_circle/img_0002.ppm")).unwrap();

    // Same flags into a second directory produce the same image bytes.
    let data2 = dir.path().join("d2");
    ok(&[
        "synth",
        "--classes",
        "2",
        "--per-class",
        "5",
        "--seed",
        "3",
        "--out",
        &s(&data2),
    ]);
    assert_eq!(
        sample_before,
        fs::read(data2.join("c0_circle/img_0002.ppm")).unwrap()
    );

    // Replaying the lock file reproduces the run without any other flags.
    let lock = dir.path().join("saved.lock.json");
    fs::copy(data.join("config.lock.json"), &lock).unwrap();
    ok(&["synth", "--from-lock", &s(&lock)]);
    assert_eq!(
        manifest_before,
        fs::read(data.join("manifest.json")).unwrap()
    );

    // A lock from another subcommand is rejected as a data error.
    let out = cli(&["eval", "--from-lock", &s(&lock)], &[]);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_eval_novelty_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&[
        "synth",
        "--classes",
        "3",
        "--per-class",
        "20",
        "--seed",
        "1",
        "--out",
        &s(&data),
    ]);
    ok(&[
        "train",
        "--data",
        &s(&data),
        "--out",
        &s(&run),
        "--kind",
        "triplet",
        "--profile",
        "mini",
        "--epochs",
        "2",
        "--samples-per-epoch",
        "20",
        "--batch-size",
        "10",
        "--val-samples",
        "10",
        "--seed",
        "1",
    ]);
    for artifact in [
        "manifest.json",
        "checkpoint.rsrt",
        "loss_history.csv",
        "config.lock.json",
    ] {
        assert!(run.join(artifact).exists(), "missing {artifact}");
    }
    let loss = fs::read_to_string(run.join("loss_history.csv")).unwrap();
    assert!(loss.starts_with("epoch,train_loss,val_loss\n"));
    assert_eq!(loss.lines().count(), 3);

    let eval = dir.path().join("eval");
    let out = ok(&[
        "eval",
        "--data",
        &s(&data),
        "--manifest",
        &s(&run.join("manifest.json")),
        "--checkpoint",
        &s(&run.join("checkpoint.rsrt")),
        "--out",
        &s(&eval),
        "--protocol",
        "knn",
        "--k",
        "1,3",
        "--index-scope",
        "train",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Average"));
    let csv = fs::read_to_string(eval.join("knn_report.csv")).unwrap();
    assert!(csv.starts_with("k,c0_circle,c1_square,c2_triangle,average"));

    let novelty = dir.path().join("novelty");
    ok(&[
        "novelty",
        "--data",
        &s(&data),
        "--manifest",
        &s(&run.join("manifest.json")),
        "--checkpoint",
        &s(&run.join("checkpoint.rsrt")),
        "--out",
        &s(&novelty),
        "--holdout-class",
        "c2_triangle",
        "--method",
        "pca",
        "--dims",
        "1,2",
        "--seed",
        "1",
    ]);
    let report = fs::read_to_string(novelty.join("novelty_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    let projection = fs::read_to_string(novelty.join("projection.csv")).unwrap();
    assert!(projection.starts_with("id,label,is_new,c1,c2"));

    // LDA with 3 known... here only 2 known classes remain, so dims 2 must
    // fail the C-1 bound with a data-error exit.
    let out = cli(
        &[
            "novelty",
            "--data",
            &s(&data),
            "--manifest",
            &s(&run.join("manifest.json")),
            "--checkpoint",
            &s(&run.join("checkpoint.rsrt")),
            "--out",
            &s(&dir.path().join("novelty2")),
            "--holdout-class",
            "c2_triangle",
            "--method",
            "lda",
            "--dims",
            "2",
        ],
        &[],
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes - 1"));
}
