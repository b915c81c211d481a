mod common;

use std::path::Path;
use std::process::{Command, Output};

use biolm::cli::RunManifest;
use biolm::corpus::{parse_records, serialize_records, stats};

fn biolm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biolm"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn succeeded(out: &Output) {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn ok(out: &Output) -> serde_json::Value {
    succeeded(out);
    serde_json::from_slice(&out.stdout).unwrap()
}

const TINY: [&str; 12] = [
    "--set",
    "preset=tiny",
    "--set",
    "max_positions=32",
    "--set",
    "batch_size=8",
    "--set",
    "max_steps=12",
    "--set",
    "warmup=2",
    "--set",
    "min_tail_tokens=1",
];

fn write_corpus(dir: &Path) {
    let texts = common::fact_sentences("", 4);
    std::fs::write(
        dir.join("corpus.jsonl"),
        serialize_records(&common::records(&texts)),
    )
    .unwrap();
}

#[test]
fn corpus_stats_counts_three_records() {
    let dir = tempfile::tempdir().unwrap();
    let texts: Vec<String> = ["one two three", "four five", "six"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let content = serialize_records(&common::records(&texts));
    std::fs::write(dir.path().join("c.jsonl"), &content).unwrap();
    let v = ok(&biolm(dir.path(), &["corpus-stats", "c.jsonl"]));
    let expected = stats(&parse_records(&content).unwrap());
    assert_eq!(v["documents"], 3);
    assert_eq!(v["words"], expected.words);
    assert_eq!(expected.words, 6);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(biolm(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        biolm(dir.path(), &["gradcheck", "--no-such-flag"])
            .status
            .code(),
        Some(2)
    );
    write_corpus(dir.path());
    let bad = biolm(
        dir.path(),
        &[
            "train-tokenizer",
            "corpus.jsonl",
            "v.txt",
            "--set",
            "epochs=abc",
        ],
    );
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("epochs"));
    let unknown = biolm(
        dir.path(),
        &[
            "train-tokenizer",
            "corpus.jsonl",
            "v.txt",
            "--set",
            "colour=red",
        ],
    );
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("colour"));
}

#[test]
fn missing_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        biolm(dir.path(), &["corpus-stats", "absent.jsonl"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = biolm(dir.path(), &["gradcheck"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(report.lines().count() >= 2);
    assert!(report.lines().all(|l| l.starts_with("ok ")));
}

#[test]
fn rerun_from_manifest_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    ok(&biolm(
        dir.path(),
        &["train-tokenizer", "corpus.jsonl", "vocab.txt"],
    ));
    let mut args = vec![
        "pretrain",
        "corpus.jsonl",
        "vocab.txt",
        "a.ckpt",
        "--threads",
        "1",
        "--seed",
        "3",
    ];
    args.extend(TINY);
    ok(&biolm(dir.path(), &args));
    let manifest: RunManifest =
        serde_json::from_slice(&std::fs::read(dir.path().join("a.ckpt.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest.command, "pretrain");
    assert_eq!(manifest.seed, 3);
    assert_eq!(manifest.config["max_steps"], "12");
    assert!(manifest.digests.len() >= 4);
    ok(&biolm(
        dir.path(),
        &[
            "pretrain",
            "corpus.jsonl",
            "vocab.txt",
            "b.ckpt",
            "--threads",
            "1",
            "--config",
            "a.ckpt.manifest.json",
        ],
    ));
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a.ckpt"), read("b.ckpt"));
    assert_eq!(read("a.ckpt.history.jsonl"), read("b.ckpt.history.jsonl"));
}

#[test]
fn evaluate_matches_finetune_report() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    ok(&biolm(
        dir.path(),
        &["train-tokenizer", "corpus.jsonl", "vocab.txt"],
    ));
    let mut args = vec![
        "pretrain",
        "corpus.jsonl",
        "vocab.txt",
        "base.ckpt",
        "--threads",
        "1",
    ];
    args.extend(TINY);
    ok(&biolm(dir.path(), &args));
    let labels = ["entailment", "contradiction", "neutral"];
    let facts = common::fact_sentences("", 4);
    let nli: String = facts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            serde_json::json!({"id": format!("n{i}"), "premise": t, "hypothesis": facts[(i + 1) % facts.len()], "gold": labels[i % 3]})
                .to_string()
                + "\n"
        })
        .collect();
    std::fs::write(dir.path().join("nli.jsonl"), nli).unwrap();
    ok(&biolm(
        dir.path(),
        &[
            "finetune",
            "base.ckpt",
            "vocab.txt",
            "nli.jsonl",
            "ft.ckpt",
            "--dev",
            "nli.jsonl",
            "--task",
            "nli",
            "--threads",
            "1",
            "--set",
            "epochs=2",
            "--set",
            "batch_size=8",
        ],
    ));
    succeeded(&biolm(
        dir.path(),
        &[
            "predict",
            "ft.ckpt",
            "vocab.txt",
            "nli.jsonl",
            "pred.jsonl",
            "--task",
            "nli",
        ],
    ));
    let evaluated = ok(&biolm(dir.path(), &["evaluate", "nli=pred.jsonl"]));
    let reported: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("ft.ckpt.report.json")).unwrap())
            .unwrap();
    assert_eq!(evaluated, reported);
    let bare = ok(&biolm(
        dir.path(),
        &["evaluate", "pred.jsonl", "--task", "nli"],
    ));
    assert_eq!(bare, reported);
}
