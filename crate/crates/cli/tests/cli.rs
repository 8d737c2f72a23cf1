//! Drives the `styf` binary end to end on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const GOLDEN_CORPUS_SHA256: &str = "5f4c3c19cb4d0b4fec46c320ca54b8f3e1869cec9ea29dc5ab836badf898626a";

const TINY: &str = r#"
steps = 12
batch_size = 2
window = 32
n_ctx = 4
n_gen = 8
eval_interval = 6
eval_items = 24

[model]
hidden = 16
heads = 2
layers = 1
max_len = 32
"#;

fn styf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_styf"))
        .args(args)
        .current_dir(cwd)
        .env_remove("STYF_SEED")
        .output()
        .expect("styf runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn sha256(path: &Path) -> String {
    Sha256::digest(std::fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn default_corpus_matches_the_golden_hash() {
    let dir = tempfile::tempdir().unwrap();
    ok(&styf(&["make-corpus", "--docs-per-style", "200", "--seed", "42", "--out", "c.jsonl"], dir.path()));
    let path = dir.path().join("c.jsonl");
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 600);
    assert_eq!(sha256(&path), GOLDEN_CORPUS_SHA256);
    let manifest = json(&dir.path().join("c.jsonl.manifest.json"));
    assert_eq!(manifest["corpus_sha256"], GOLDEN_CORPUS_SHA256);
    assert_eq!(manifest["seed"], 42);
    assert!(manifest["started_unix"].as_u64().unwrap() <= manifest["finished_unix"].as_u64().unwrap());
}

#[test]
fn corpus_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.jsonl", "b.jsonl"] {
        ok(&styf(&["make-corpus", "--docs-per-style", "5", "--seed", "9", "--out", name], dir.path()));
    }
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = styf(&["make-corpus", "--docs-per-style", "0", "--out", "c.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(styf(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(styf(&["train", "--corpus", "c.jsonl"], dir.path()).status.code(), Some(2));
}

#[test]
fn training_without_a_language_model_names_pretrain_lm() {
    let dir = tempfile::tempdir().unwrap();
    ok(&styf(&["make-corpus", "--docs-per-style", "5", "--out", "c.jsonl"], dir.path()));
    for cmd in ["train", "pretrain-comparator"] {
        let out = styf(&[cmd, "--corpus", "c.jsonl", "--out", "run"], dir.path());
        assert_eq!(out.status.code(), Some(1));
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("pretrain-lm") && err.contains("lm.ckpt"), "{cmd}: {err}");
    }
}

/// Runs the three training phases on the tiny config into `<cwd>/<run>`.
fn train_all(cwd: &Path, run: &str) -> PathBuf {
    std::fs::write(cwd.join("tiny.toml"), TINY).unwrap();
    if !cwd.join("c.jsonl").exists() {
        ok(&styf(&["make-corpus", "--docs-per-style", "30", "--seed", "3", "--out", "c.jsonl"], cwd));
    }
    for cmd in ["pretrain-lm", "pretrain-comparator"] {
        ok(&styf(&[cmd, "--config", "tiny.toml", "--corpus", "c.jsonl", "--out", run], cwd));
    }
    ok(&styf(&["train", "--config", "tiny.toml", "--corpus", "c.jsonl", "--out", run, "--variant", "B"], cwd));
    cwd.join(run)
}

#[test]
fn pipeline_artifacts_are_reproducible_and_usable() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let a = train_all(cwd, "a");
    let b = train_all(cwd, "b");
    for file in [
        "lm.ckpt",
        "comparator.ckpt",
        "generator.ckpt",
        "discriminator.ckpt",
        "lm_log.jsonl",
        "comparator_log.jsonl",
        "generator_log.jsonl",
    ] {
        assert_eq!(sha256(&a.join(file)), sha256(&b.join(file)), "{file} differs between identical runs");
    }
    let manifest = json(&a.join("train.manifest.json"));
    assert_eq!(manifest["config"]["model"]["variant"], "B");
    assert_eq!(manifest["corpus_sha256"].as_str().unwrap(), sha256(&cwd.join("c.jsonl")));
    assert!(manifest["git_describe"].as_str().is_some_and(|s| !s.is_empty()));
    let snapshot = std::fs::read_to_string(a.join("train.config.toml")).unwrap();
    assert!(snapshot.contains("phase = \"train-generator\""));

    std::fs::write(cwd.join("ref.txt"), "the rain falls slow\nthe rain falls low\n").unwrap();
    let gen = |extra: &[&str]| {
        let mut args = vec![
            "generate",
            "--checkpoint",
            "a/generator.ckpt",
            "--context",
            "The",
            "--reference",
            "ref.txt",
            "--n-tokens",
            "10",
        ];
        args.extend_from_slice(extra);
        styf(&args, cwd)
    };
    let first = gen(&["--top-k", "1"]);
    ok(&first);
    assert_eq!(first.stdout, gen(&["--top-k", "1"]).stdout);
    assert_eq!(gen(&["--n-tokens", "0"]).status.code(), Some(2));
    ok(&gen(&["--top-k", "4", "--seed", "5", "--emit-features", "f.json"]));
    let feats = json(&cwd.join("f.json"));
    assert_eq!(feats["tokens"].as_array().unwrap().len(), 10);
    let rows = feats["features"].as_array().unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.as_array().unwrap().len() == 16));

    ok(&styf(&["evaluate", "--checkpoint", "a/generator.ckpt", "--corpus", "c.jsonl", "--n-samples", "6", "--out", "r.json"], cwd));
    let report = json(&cwd.join("r.json"));
    for key in ["fluency", "style_score", "diversity", "novelty", "per_style", "n"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    for range in ["diversity", "novelty"] {
        let r = &report[range];
        assert!(r["value"].is_f64() && r["lower"].as_f64().unwrap() <= r["upper"].as_f64().unwrap());
    }
    assert_eq!(report["per_style"].as_object().unwrap().len(), 3);
    let csv = std::fs::read_to_string(cwd.join("r.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("label,fluency,style_score"));
    assert_eq!(csv.lines().count(), 5);

    let out = styf(
        &["evaluate", "--checkpoint", "a/generator.ckpt", "--corpus", "c.jsonl", "--n-samples", "6", "--out", "ab.json", "--drop-loss", "style"],
        cwd,
    );
    ok(&out);
    let ab = json(&cwd.join("ab.json"));
    assert_eq!(ab["dropped"], "style");
    assert_eq!(ab["full"], report);
    let delta = ab["ablated"]["style_score"].as_f64().unwrap() - report["style_score"].as_f64().unwrap();
    assert!((ab["delta"]["style_score"].as_f64().unwrap() - delta).abs() < 1e-12);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let run = train_all(cwd, "run");
    let mut bytes = std::fs::read(run.join("generator.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(cwd.join("bad.ckpt"), bytes).unwrap();
    std::fs::write(cwd.join("ref.txt"), "SOME CAPITAL WORDS").unwrap();
    let out = styf(
        &["generate", "--checkpoint", "bad.ckpt", "--context", "A", "--reference", "ref.txt", "--n-tokens", "4"],
        cwd,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));
}
