//! End-to-end checks of the `nmtkit` binary: every subcommand runs, exit
//! codes distinguish usage from data errors, and reruns of a completed
//! command reproduce byte-identical primary outputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nmtkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmtkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = nmtkit(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // toy data
    ok(&["toydata", "--out", &path(dir, "data"), "--seed", "7"]);
    assert!(dir.join("data/general-train.src").exists());
    assert!(dir.join("data/alpha-dev.tgt").exists());

    // preprocess raw text (reusing a generated file as raw input)
    ok(&[
        "preprocess",
        "--src",
        &path(dir, "data/general-train.src"),
        "--tgt",
        &path(dir, "data/general-train.tgt"),
        "--out",
        &path(dir, "prep"),
    ]);
    let stats = fs::read_to_string(dir.join("prep/stats.kv")).unwrap();
    assert!(stats.contains("corpus.sentences = 600"), "{stats}");

    // tokenizers
    ok(&[
        "tokenizer-train",
        "--corpus",
        &path(dir, "data/alpha-train"),
        "--vocab-size",
        "150",
        "--out",
        &path(dir, "tok"),
    ]);
    assert!(dir.join("tok/tokenizer.src.vocab").exists());

    // small deterministic training run, twice
    for run in ["run1", "run2"] {
        ok(&[
            "train",
            "--model",
            "lstm",
            "--strategy",
            "general",
            "--general",
            &path(dir, "data/alpha-train"),
            "--general-dev",
            &path(dir, "data/alpha-dev"),
            "--src-tokenizer",
            &path(dir, "tok/tokenizer.src.vocab"),
            "--tgt-tokenizer",
            &path(dir, "tok/tokenizer.tgt.vocab"),
            "--out",
            &path(dir, run),
            "--epochs",
            "2",
            "--batch-size",
            "8",
            "--seed",
            "11",
        ]);
    }
    let ckpt1 = fs::read(dir.join("run1/checkpoint.nmtc")).unwrap();
    let ckpt2 = fs::read(dir.join("run2/checkpoint.nmtc")).unwrap();
    assert_eq!(ckpt1, ckpt2, "identical runs must produce identical checkpoints");
    assert_eq!(
        fs::read_to_string(dir.join("run1/report.kv")).unwrap(),
        fs::read_to_string(dir.join("run2/report.kv")).unwrap()
    );

    // translate a few lines
    let input = dir.join("input.txt");
    fs::write(&input, "kemo timo nasa\npira luto\n\n").unwrap();
    ok(&[
        "translate",
        "--checkpoint",
        &path(dir, "run1/checkpoint.nmtc"),
        "--src-tokenizer",
        &path(dir, "tok/tokenizer.src.vocab"),
        "--tgt-tokenizer",
        &path(dir, "tok/tokenizer.tgt.vocab"),
        "--input",
        &input.display().to_string(),
        "--output",
        &path(dir, "output.txt"),
    ]);
    let translated = fs::read_to_string(dir.join("output.txt")).unwrap();
    assert_eq!(translated.lines().count(), 3, "line count preserved");

    // evaluate with hyp == ref prints a perfect score
    let sample = dir.join("sample.txt");
    fs::write(&sample, "inakx orupx\nemitx ilokx aromx\n").unwrap();
    let stdout = ok(&[
        "evaluate",
        "--hyp",
        &sample.display().to_string(),
        "--ref",
        &sample.display().to_string(),
    ]);
    assert!(stdout.contains("bleu=100.00"), "stdout: {stdout}");

    // coverage report runs
    let cov = ok(&[
        "coverage",
        "--reference",
        &path(dir, "data/general-train"),
        "--probe",
        &path(dir, "data/alpha-train"),
    ]);
    assert!(cov.contains("unique"), "stdout: {cov}");
}

#[test]
fn usage_and_data_error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["toydata", "--out", &path(dir, "data"), "--seed", "3"]);
    ok(&[
        "tokenizer-train",
        "--corpus",
        &path(dir, "data/alpha-train"),
        "--vocab-size",
        "120",
        "--out",
        &path(dir, "tok"),
    ]);

    // finetune without a base checkpoint is a usage error
    let out = nmtkit(&[
        "train",
        "--model",
        "lstm",
        "--strategy",
        "finetune",
        "--general",
        &path(dir, "data/general-train"),
        "--general-dev",
        &path(dir, "data/general-dev"),
        "--domain",
        &path(dir, "data/alpha-train"),
        "--domain-dev",
        &path(dir, "data/alpha-dev"),
        "--src-tokenizer",
        &path(dir, "tok/tokenizer.src.vocab"),
        "--tgt-tokenizer",
        &path(dir, "tok/tokenizer.tgt.vocab"),
        "--out",
        &path(dir, "ft"),
    ]);
    assert_eq!(out.status.code(), Some(2), "usage error must exit 2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("base-checkpoint"), "stderr: {stderr}");

    // missing input file is a data error
    let out = nmtkit(&[
        "evaluate",
        "--hyp",
        &path(dir, "missing.txt"),
        "--ref",
        &path(dir, "missing.txt"),
    ]);
    assert_eq!(out.status.code(), Some(3), "data error must exit 3");

    // mismatched line counts are a data error
    fs::write(dir.join("a.src"), "one\ntwo\n").unwrap();
    fs::write(dir.join("a.tgt"), "one\n").unwrap();
    let out = nmtkit(&[
        "preprocess",
        "--src",
        &path(dir, "a.src"),
        "--tgt",
        &path(dir, "a.tgt"),
        "--out",
        &path(dir, "prep"),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line count"));
}

#[test]
fn experiment_writes_six_rows_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let overrides = [
        "data.toy_general_train=80",
        "data.toy_general_dev=12",
        "data.toy_general_test=12",
        "data.toy_domain_train=24",
        "data.toy_domain_dev=10",
        "data.toy_domain_test=10",
        "tokenizer.vocab_size=120",
        "training.epochs=2",
        "training.finetune_epochs=1",
        "training.batch_size=8",
    ];
    for run in ["e1", "e2"] {
        let mut args: Vec<String> = vec!["experiment".into(), "--out".into(), path(dir, run)];
        for o in overrides {
            args.push("--set".into());
            args.push(o.into());
        }
        let arg_refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        ok(&arg_refs);
    }
    let csv = fs::read_to_string(dir.join("e1/matrix.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7, "header + 6 cells:\n{csv}");
    assert!(lines[0].starts_with("model,strategy,domain,split,bleu"));
    for family in ["lstm", "transformer"] {
        for strategy in ["general", "mixed", "finetune"] {
            assert!(
                lines.iter().any(|l| l.starts_with(&format!("{family},{strategy},"))),
                "missing row {family},{strategy}"
            );
        }
    }
    // effective config is echoed and complete
    let conf = fs::read_to_string(dir.join("e1/effective.conf")).unwrap();
    assert!(conf.contains("[training]") && conf.contains("epochs = 2"));

    // reruns produce byte-identical primary outputs
    assert_eq!(
        fs::read_to_string(dir.join("e1/matrix.csv")).unwrap(),
        fs::read_to_string(dir.join("e2/matrix.csv")).unwrap()
    );
    assert_eq!(
        fs::read(dir.join("e1/lstm-mixed/checkpoint.nmtc")).unwrap(),
        fs::read(dir.join("e2/lstm-mixed/checkpoint.nmtc")).unwrap()
    );
}
