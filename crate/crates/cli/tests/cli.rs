use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn metasum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metasum"))
        .args(args)
        .env_remove("METASUM_RUN_ROOT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = metasum(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn splits(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("splits.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_default_writes_4000_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let stdout = ok(&["gen-data", "--out", s(&out)]);
    assert!(stdout.contains("4000 cases"), "{stdout}");
    assert!(stdout.contains("median"));
    let text = fs::read_to_string(out.join("corpus.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4000);
    for f in ["lexicon.tsv", "icd10_lexicon.tsv", "splits.json", "spec.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn gen_data_is_reproducible_and_scales_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(&["gen-data", "--seed", "7", "--cases", "300", "--out", s(&a)]);
    ok(&["gen-data", "--seed", "7", "--cases", "300", "--out", s(&b)]);
    ok(&["gen-data", "--seed", "8", "--cases", "300", "--out", s(&c)]);
    for f in ["corpus.jsonl", "lexicon.tsv", "icd10_lexicon.tsv", "splits.json", "spec.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("corpus.jsonl")).unwrap(), fs::read(c.join("corpus.jsonl")).unwrap());

    let d = tmp.path().join("d");
    ok(&["gen-data", "--cases", "100", "--out", s(&d)]);
    let sp = splits(&d);
    let len = |k: &str| sp[k].as_array().unwrap().len();
    assert_eq!((len("train"), len("valid"), len("test")), (90, 5, 5));
}

#[test]
fn bad_spec_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"n_physicians": 2}"#).unwrap();
    let out = metasum(&["gen-data", s(&spec), "--out", s(&tmp.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
    fs::write(&spec, "{not json").unwrap();
    assert!(!metasum(&["gen-data", s(&spec)]).status.success());
}

/// A small corpus and a manifest over it, in `dir`.
fn setup(dir: &Path, kinds: &[&str], seeds: &[u64], epochs: usize) -> PathBuf {
    ok(&["gen-data", "--cases", "120", "--seed", "3", "--out", s(&dir.join("corpus"))]);
    let manifest = json!({
        "experiment": "exp",
        "corpus": "corpus",
        "out_dir": "runs",
        "kinds": kinds,
        "seeds": seeds,
        "vocab_size": 300,
        "model": {
            "layers": 1, "d_model": 8, "heads": 2, "window": 8,
            "max_input_len": 96, "max_output_len": 24, "ffn_dim": 16
        },
        "train": {"batch_size": 8, "base_lr": 0.003, "warmup_steps": 10, "max_epochs": epochs}
    });
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for kind in fs::read_dir(root.join("runs")).unwrap() {
        let kind = kind.unwrap().path();
        if kind.file_name().unwrap() == "exp" {
            continue;
        }
        for seed in fs::read_dir(&kind).unwrap() {
            out.push(seed.unwrap().path());
        }
    }
    out.sort();
    out
}

#[test]
fn train_makes_one_run_per_kind_and_seed_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = setup(tmp.path(), &["disease"], &[0, 1, 2], 2);
    ok(&["train", s(&manifest)]);
    let dirs = run_dirs(tmp.path());
    assert_eq!(dirs.len(), 6, "{dirs:?}");
    assert!(tmp.path().join("runs/exp-vanilla/seed1/epoch2.ckpt").exists());
    assert!(tmp.path().join("runs/exp-disease/seed2/config.json").exists());
    assert!(tmp.path().join("runs/exp/vocab.txt").exists());
    let metrics = |d: &Path| fs::read(d.join("metrics.jsonl")).unwrap();
    let first: Vec<Vec<u8>> = dirs.iter().map(|d| metrics(d)).collect();
    assert!(first.iter().all(|m| m.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count() == 2));

    ok(&["train", s(&manifest), "--parallel", "2"]);
    let second: Vec<Vec<u8>> = dirs.iter().map(|d| metrics(d)).collect();
    assert_eq!(first, second);
}

#[test]
fn missing_corpus_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("m.json");
    fs::write(&manifest, r#"{"experiment": "e", "corpus": "nowhere"}"#).unwrap();
    let out = metasum(&["train", s(&manifest)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus not found"));
}

#[test]
fn resume_after_kill_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = setup(tmp.path(), &[], &[5], 30);
    let dir = tmp.path().join("runs/exp-vanilla/seed5");

    let mut child = Command::new(env!("CARGO_BIN_EXE_metasum"))
        .args(["train", s(&manifest)])
        .env_remove("METASUM_RUN_ROOT")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(120);
    while !dir.join("epoch2.ckpt").exists() {
        assert!(Instant::now() < deadline, "training never reached epoch 2");
        sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(!dir.join("run.json").exists(), "run finished before it could be interrupted");

    ok(&["train", s(&manifest), "--resume"]);
    let resumed = fs::read(dir.join("metrics.jsonl")).unwrap();
    let last = fs::read(dir.join("epoch30.ckpt")).unwrap();

    // a second resume has nothing left to do and changes nothing
    ok(&["train", s(&manifest), "--resume"]);
    assert_eq!(fs::read(dir.join("metrics.jsonl")).unwrap(), resumed);

    ok(&["train", s(&manifest)]);
    assert_eq!(fs::read(dir.join("metrics.jsonl")).unwrap(), resumed);
    assert_eq!(fs::read(dir.join("epoch30.ckpt")).unwrap(), last);
}

#[test]
fn eval_reports_one_row_per_kind_and_means_match() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = setup(tmp.path(), &[], &[0], 1);

    let out = metasum(&["eval", s(&manifest)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing artifacts") && err.contains("vanilla seed 0"), "{err}");

    ok(&["train", s(&manifest)]);
    let table = ok(&["eval", s(&manifest)]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(header, ["Model", "R-1", "R-2", "R-L", "Numeral", "Symbol", "Disease", "Symptom", "Other"]);
    assert!(lines[2].starts_with("Vanilla"));
    assert_eq!(ok(&["report", s(&manifest)]), table);
    assert!(tmp.path().join("runs/exp-vanilla/seed0/predictions.jsonl").exists());
}

#[test]
fn json_seed_values_average_to_table_values() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = setup(tmp.path(), &["hospital"], &[0, 1, 2], 1);
    ok(&["train", s(&manifest), "--parallel", "3"]);
    let table = ok(&["eval", s(&manifest)]);
    let report: Value = serde_json::from_str(&ok(&["report", s(&manifest), "--json"])).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let table_rows: Vec<&str> = table.lines().skip(2).collect();
    for (row, line) in rows.iter().zip(table_rows) {
        let seeds = row["report"]["seeds"].as_array().unwrap();
        assert_eq!(seeds.len(), 3);
        let mean = |key: &str| seeds.iter().map(|s| s[key]["f1"].as_f64().unwrap()).sum::<f64>() / 3.0;
        let cells: Vec<f64> = line
            .trim_start_matches(row["label"].as_str().unwrap())
            .split_whitespace()
            .take(3)
            .map(|c| c.trim_end_matches('*').parse().unwrap())
            .collect();
        for (cell, key) in cells.iter().zip(["rouge1", "rouge2", "rougeL"]) {
            assert_eq!(format!("{:.2}", mean(key) * 100.0), format!("{cell:.2}"), "{key}");
            let stored = row["report"][key]["f1"].as_f64().unwrap();
            assert!((stored - mean(key)).abs() < 1e-12);
        }
    }
}

#[test]
fn run_root_env_places_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = setup(tmp.path(), &[], &[0], 1);
    let root = tmp.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_metasum"))
        .args(["train", s(&manifest)])
        .env("METASUM_RUN_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("runs/exp-vanilla/seed0/run.json").exists());
    assert!(!tmp.path().join("runs").exists());
}
