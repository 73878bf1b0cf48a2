//! Black-box tests of the `distillab` binary: usage errors, config
//! precedence, artifact layout, and end-to-end determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn binary() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_distillab"));
    cmd.env_remove("DLAB_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    binary().args(args).output().expect("spawn distillab")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small generated dataset shared by all training tests.
fn data_dir() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = std::env::temp_dir().join(format!("distillab-cli-data-{}", std::process::id()));
        let out = run(&[
            "gen-data",
            "--out",
            dir.to_str().unwrap(),
            "--vocab",
            "128",
            "--topics",
            "8",
            "--train-size",
            "240",
            "--test-size",
            "80",
            "--dev-pairs",
            "40",
            "--test-pairs",
            "40",
            "--seed",
            "5",
        ]);
        assert!(out.status.success(), "gen-data failed: {}", stderr(&out));
        dir
    })
}

fn train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "--out",
        out,
        "--data",
        data_dir().to_str().unwrap(),
        "--vocab",
        "128",
        "--steps",
        "8",
        "--batch-size",
        "16",
        "--learning-rate",
        "0.02",
        "--eval-interval",
        "4",
        "--dim-token",
        "8",
        "--dim-hidden",
        "16",
        "--dim-output",
        "8",
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["gen-data", "--no-such-flag", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_writes_all_splits_and_manifest() {
    let dir = data_dir();
    for name in [
        "train.txt",
        "test.txt",
        "dev-pairs.tsv",
        "test-pairs.tsv",
        "manifest.txt",
    ] {
        assert!(dir.join(name).exists(), "missing {name}");
    }
    let manifest = std::fs::read_to_string(dir.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("command gen-data\n"));
    assert!(manifest.contains("seed = 5"));
    let pairs = std::fs::read_to_string(dir.join("dev-pairs.tsv")).unwrap();
    let first = pairs.lines().next().unwrap();
    assert_eq!(first.split('\t').count(), 3, "pair line layout: {first:?}");
}

#[test]
fn missing_data_directory_fails_with_located_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = binary()
        .args([
            "train-teacher",
            "--out",
            out_dir.to_str().unwrap(),
            "--data",
            tmp.path().join("nowhere").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train.txt"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 4\nlerning-rate = 0.1\n").unwrap();
    let out = binary()
        .args([
            "gen-data",
            "--out",
            tmp.path().join("out").to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("lerning-rate"), "{}", stderr(&out));
}

#[test]
fn seed_precedence_is_flag_env_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 5\nvocab = 64\ntrain-size = 40\ntest-size = 20\ndev-pairs = 10\ntest-pairs = 10\ntopics = 4\n").unwrap();
    let manifest_seed = |out_dir: &Path| {
        let text = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
        text.lines()
            .find(|l| l.starts_with("seed = "))
            .unwrap()
            .to_string()
    };

    let out_dir = tmp.path().join("file-only");
    let out = binary()
        .args([
            "gen-data",
            "--out",
            out_dir.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(manifest_seed(&out_dir), "seed = 5");

    let out_dir = tmp.path().join("env");
    let out = binary()
        .args([
            "gen-data",
            "--out",
            out_dir.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
        ])
        .env("DLAB_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(manifest_seed(&out_dir), "seed = 7");

    let out_dir = tmp.path().join("flag");
    let out = binary()
        .args([
            "gen-data",
            "--out",
            out_dir.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "9",
        ])
        .env("DLAB_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(manifest_seed(&out_dir), "seed = 9");
}

#[test]
fn malformed_dlab_seed_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = binary()
        .args([
            "gen-data",
            "--out",
            tmp.path().join("out").to_str().unwrap(),
        ])
        .env("DLAB_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("DLAB_SEED"), "{}", stderr(&out));
}

#[test]
fn teacher_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out_dir in [&out_a, &out_b] {
        let out = train_once(
            &train_args(out_dir.to_str().unwrap(), &["--seed", "3"]),
            "train-teacher",
        );
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let metrics_a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let metrics_b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b);
    let ckpt_a = std::fs::read(out_a.join("checkpoint-r0.bin")).unwrap();
    let ckpt_b = std::fs::read(out_b.join("checkpoint-r0.bin")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
    let manifest = std::fs::read_to_string(out_a.join("manifest.txt")).unwrap();
    assert!(manifest.starts_with("command train-teacher\n"));
    assert!(manifest.contains("steps = 8"));
}

fn train_once(args: &[&str], prefix: &str) -> Output {
    let mut full = vec![prefix];
    full.extend_from_slice(args);
    run(&full)
}

#[test]
fn distill_evaluate_and_diagnose_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let t0 = tmp.path().join("t0");
    let t1 = tmp.path().join("t1");
    let out = train_once(
        &train_args(t0.to_str().unwrap(), &["--seed", "3"]),
        "train-teacher",
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let out = train_once(
        &train_args(t1.to_str().unwrap(), &["--seed", "4"]),
        "train-teacher",
    );
    assert!(out.status.success(), "{}", stderr(&out));

    let teachers = format!(
        "{},{}",
        t0.join("checkpoint-r0.bin").display(),
        t1.join("checkpoint-r0.bin").display()
    );
    let student = tmp.path().join("student");
    let out = train_once(
        &train_args(
            student.to_str().unwrap(),
            &[
                "--seed",
                "3",
                "--teachers",
                &teachers,
                "--shuffle-mode",
                "group-p",
                "--threads",
                "2",
            ],
        ),
        "distill",
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let student_ckpt = student.join("checkpoint-r1.bin");
    assert!(student_ckpt.exists());

    let pairs = data_dir().join("test-pairs.tsv");
    let out = run(&[
        "evaluate",
        "--out",
        tmp.path().join("eval").to_str().unwrap(),
        "--checkpoint",
        student_ckpt.to_str().unwrap(),
        "--pairs",
        pairs.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let line = stdout(&out);
    let value: f64 = line
        .trim()
        .strip_prefix("spearman ")
        .unwrap_or_else(|| panic!("unexpected output {line:?}"))
        .parse()
        .unwrap();
    assert!((-1.0..=1.0).contains(&value));

    let diag = tmp.path().join("diag");
    let out = run(&[
        "diagnose",
        "--out",
        diag.to_str().unwrap(),
        "--checkpoint",
        student_ckpt.to_str().unwrap(),
        "--data",
        data_dir().to_str().unwrap(),
        "--teachers",
        &teachers,
        "--batch-size",
        "16",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = std::fs::read_to_string(diag.join("report.csv")).unwrap();
    assert!(report.starts_with("name,split,value\n"));
    for needle in [
        "kl_first_order",
        "kl_second_order",
        "cross_teacher_spearman",
        "distill_gap_ensemble",
        "sts_spearman,test",
    ] {
        assert!(
            report.contains(needle),
            "report missing {needle}:\n{report}"
        );
    }
    let sharpness = std::fs::read_to_string(diag.join("sharpness.csv")).unwrap();
    assert!(sharpness.starts_with("rank,logit,label\n"));
    assert!(sharpness.contains("train-in-batch"));
    assert!(sharpness.contains("test-pairs"));
}

#[test]
fn self_train_writes_one_checkpoint_per_round() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("selftrain");
    let out = train_once(
        &train_args(
            out_dir.to_str().unwrap(),
            &[
                "--seed",
                "3",
                "--rounds",
                "1",
                "--ensemble-size",
                "2",
                "--shuffle-mode",
                "group-p",
            ],
        ),
        "self-train",
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out_dir.join("checkpoint-r0.bin").exists());
    assert!(out_dir.join("checkpoint-r1.bin").exists());
    assert!(out_dir.join("metrics.csv").exists());
    let text = stdout(&out);
    assert!(text.contains("round 0:"), "{text}");
    assert!(text.contains("round 1:"), "{text}");
}

#[test]
fn sweep_emits_one_row_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("sweep");
    let out = train_once(
        &train_args(
            out_dir.to_str().unwrap(),
            &[
                "--seed",
                "3",
                "--ensemble-size",
                "2",
                "--p-grid",
                "0.1,0.15",
                "--lambda-grid",
                "1",
                "--tau-grid",
                "0.05,0.02",
            ],
        ),
        "sweep",
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let grid = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines[0], "p,lambda,tau_s,tau_t,dev_spearman,test_spearman");
    // 2 p-points + 1 lambda-point + 2x2 temperature pairs.
    assert_eq!(lines.len(), 1 + 2 + 1 + 4, "{grid}");
}
