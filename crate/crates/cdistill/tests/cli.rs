//! Command line behavior: pipeline smoke run, config handling, and the
//! error surface users actually hit.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

/// Small corpora so the whole pipeline stays fast in debug builds.
const SMALL_CONFIG: &str = "\
expert_corpus_lines = 150\n\
amateur_corpus_lines = 250\n\
eval_size = 40\n\
sample_problems = 40\n\
steps = 60\n\
";

fn cdistill(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdistill"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn cdistill")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cdistill(dir, args);
    assert!(
        out.status.success(),
        "cdistill {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = cdistill(dir, args);
    assert!(!out.status.success(), "cdistill {args:?} unexpectedly passed");
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("cdistill: "), "unprefixed error: {err}");
    err
}

#[test]
fn pipeline_smoke_run_produces_every_artifact() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.conf"), SMALL_CONFIG).unwrap();
    let cfg = ["--config", "run.conf"];

    ok(root, &[&["gen", "--out-dir", "out"], &cfg[..]].concat());
    for f in [
        "out/expert_corpus.txt",
        "out/amateur_corpus.txt",
        "out/eval_problems.txt",
        "out/expert.model.json",
        "out/amateur.model.json",
        "out/manifest.json",
    ] {
        assert!(root.join(f).exists(), "{f} missing after gen");
    }

    let stdout = ok(
        root,
        &[
            &[
                "sample",
                "--expert",
                "out/expert.model.json",
                "--amateur",
                "out/amateur.model.json",
                "--corpus",
                "out/expert_corpus.txt",
                "--out",
                "out/samples.jsonl",
                "--summary-out",
                "out/sample_summary.json",
                "--json",
            ],
            &cfg[..],
        ]
        .concat(),
    );
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary["kind"], "contrastive-pipeline");
    assert_eq!(summary["problems"], 40);
    assert!(summary["steps_retained"].as_u64().unwrap() > 0);

    ok(
        root,
        &[
            &[
                "train",
                "--model-in",
                "out/expert.model.json",
                "--samples",
                "out/samples.jsonl",
                "--model-out",
                "out/tuned.model.json",
                "--trace-out",
                "out/trace.csv",
            ],
            &cfg[..],
        ]
        .concat(),
    );
    let trace = std::fs::read_to_string(root.join("out/trace.csv")).unwrap();
    assert!(trace.starts_with("# {"), "trace lacks config echo: {trace}");
    assert!(trace.contains("step,mean_loss,mean_entropy"));

    ok(
        root,
        &[
            &[
                "sft",
                "--model-in",
                "out/expert.model.json",
                "--corpus",
                "out/expert_corpus.txt",
                "--model-out",
                "out/sft.model.json",
                "--summary-out",
                "out/sft_summary.json",
            ],
            &cfg[..],
        ]
        .concat(),
    );

    let eval_out = ok(
        root,
        &[
            &[
                "eval",
                "--model",
                "out/tuned.model.json",
                "--problems",
                "out/eval_problems.txt",
                "--out",
                "out/eval.csv",
            ],
            &cfg[..],
        ]
        .concat(),
    );
    assert!(eval_out.contains("exact match"), "{eval_out}");
    let eval_csv = std::fs::read_to_string(root.join("out/eval.csv")).unwrap();
    assert!(eval_csv.contains("metric,position,total,matches,value"));

    ok(
        root,
        &[
            &[
                "analyze",
                "--expert",
                "out/expert.model.json",
                "--amateur",
                "out/amateur.model.json",
                "--corpus",
                "out/expert_corpus.txt",
                "--samples",
                "out/samples.jsonl",
                "--contrastive-summary",
                "out/sample_summary.json",
                "--baseline-summary",
                "out/sft_summary.json",
                "--out-dir",
                "out",
            ],
            &cfg[..],
        ]
        .concat(),
    );
    for f in [
        "out/divergence_hist.csv",
        "out/divergence_summary.csv",
        "out/label_stats.csv",
        "out/efficiency.csv",
    ] {
        assert!(root.join(f).exists(), "{f} missing after analyze");
    }
    let efficiency = std::fs::read_to_string(root.join("out/efficiency.csv")).unwrap();
    assert!(efficiency.contains("metric,contrastive,baseline,ratio"));
}

#[test]
fn training_for_zero_steps_returns_the_input_model_byte_for_byte() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.conf"), SMALL_CONFIG).unwrap();
    let cfg = ["--config", "run.conf"];
    ok(root, &[&["gen", "--out-dir", "."], &cfg[..]].concat());
    ok(
        root,
        &[
            &[
                "sample",
                "--expert",
                "expert.model.json",
                "--amateur",
                "amateur.model.json",
                "--corpus",
                "expert_corpus.txt",
                "--out",
                "samples.jsonl",
            ],
            &cfg[..],
        ]
        .concat(),
    );
    ok(
        root,
        &[
            &[
                "train",
                "--model-in",
                "expert.model.json",
                "--samples",
                "samples.jsonl",
                "--model-out",
                "frozen.model.json",
                "--steps",
                "0",
            ],
            &cfg[..],
        ]
        .concat(),
    );
    let before = std::fs::read(root.join("expert.model.json")).unwrap();
    let after = std::fs::read(root.join("frozen.model.json")).unwrap();
    assert!(before == after, "zero-step training altered the snapshot");
}

#[test]
fn config_file_values_lose_to_explicit_flags() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    std::fs::write(
        root.join("run.conf"),
        format!("{SMALL_CONFIG}seed = 7\nmodulus = 5\n"),
    )
    .unwrap();
    ok(
        root,
        &["gen", "--out-dir", "five", "--config", "run.conf"],
    );
    ok(
        root,
        &[
            "gen",
            "--out-dir",
            "seven",
            "--config",
            "run.conf",
            "--modulus",
            "7",
        ],
    );
    let five = std::fs::read_to_string(root.join("five/expert_corpus.txt")).unwrap();
    let seven = std::fs::read_to_string(root.join("seven/expert_corpus.txt")).unwrap();
    assert!(five.lines().next().unwrap().contains("\"modulus\":5"));
    assert!(seven.lines().next().unwrap().contains("\"modulus\":7"));
}

#[test]
fn duplicate_config_keys_are_refused_with_both_lines() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.conf"), "seed = 1\nalpha = 0.5\nseed = 2\n").unwrap();
    let err = fails(root, &["--config", "run.conf", "gen"]);
    assert!(err.contains("run.conf:3:"), "{err}");
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn sampling_more_problems_than_the_corpus_has_is_an_error() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.conf"), SMALL_CONFIG).unwrap();
    ok(root, &["gen", "--out-dir", ".", "--config", "run.conf"]);
    let err = fails(
        root,
        &[
            "sample",
            "--config",
            "run.conf",
            "--expert",
            "expert.model.json",
            "--amateur",
            "amateur.model.json",
            "--corpus",
            "expert_corpus.txt",
            "--out",
            "samples.jsonl",
            "--limit",
            "151",
        ],
    );
    assert!(err.contains("151"), "{err}");
    assert!(err.contains("150"), "{err}");
}

#[test]
fn models_from_another_task_are_rejected() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("run.conf"), SMALL_CONFIG).unwrap();
    ok(root, &["gen", "--out-dir", "seven", "--config", "run.conf"]);
    ok(
        root,
        &[
            "gen",
            "--out-dir",
            "five",
            "--config",
            "run.conf",
            "--modulus",
            "5",
        ],
    );
    let err = fails(
        root,
        &[
            "eval",
            "--config",
            "run.conf",
            "--model",
            "five/expert.model.json",
            "--problems",
            "seven/eval_problems.txt",
        ],
    );
    assert!(err.contains("vocabulary"), "{err}");
}

#[test]
fn analyze_without_any_input_refuses_to_run() {
    let dir = tempdir().unwrap();
    let err = fails(dir.path(), &["analyze", "--out-dir", "."]);
    assert!(err.contains("nothing to analyze"), "{err}");
}
