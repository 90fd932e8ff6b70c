use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;
use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_civic-evidence"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn row(pubmed_id: u64, scores: [f64; 5], gold: &str, predicted: Option<&str>) -> String {
    let labels = |s: &str| {
        let m: serde_json::Map<String, Value> =
            ["A", "B", "C", "D", "E"].iter().map(|l| (l.to_string(), Value::Bool(s.contains(l)))).collect();
        Value::Object(m)
    };
    let mut v = serde_json::json!({ "pubmed_id": pubmed_id, "scores": scores, "gold": labels(gold) });
    if let Some(p) = predicted {
        v["predicted"] = labels(p);
    }
    v.to_string()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
    assert_eq!(code(&run(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&run(dir.path(), &["evaluate"])), 1);
    assert_eq!(code(&run(dir.path(), &["evaluate", "--predictions", "p", "--out", "o", "--bogus"])), 1);
    assert_eq!(code(&run(dir.path(), &["report", "--out", "r"])), 1);
}

#[test]
fn missing_and_malformed_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["evaluate", "--predictions", "absent.jsonl", "--out", "o"])), 2);
    fs::write(d.join("bad.jsonl"), "{\"scores\": 1}\n").unwrap();
    assert_eq!(code(&run(d, &["evaluate", "--predictions", "bad.jsonl", "--out", "o"])), 2);
    fs::write(d.join("bad.toml"), "[model]\nlayers = 2\n").unwrap();
    assert_eq!(code(&run(d, &["--config", "bad.toml", "calibrate", "--predictions", "x", "--out", "t"])), 1);
}

#[test]
fn evaluate_writes_score_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let lines = [
        row(1, [0.9, 0.1, 0.1, 0.1, 0.1], "A", None),
        row(2, [0.6, 0.7, 0.1, 0.1, 0.1], "B", None),
        row(3, [0.2, 0.8, 0.1, 0.1, 0.1], "B", None),
        row(4, [0.1, 0.4, 0.9, 0.1, 0.1], "BC", None),
    ];
    fs::write(d.join("p.jsonl"), lines.join("\n")).unwrap();
    ok(d, &["evaluate", "--predictions", "p.jsonl", "--name", "fixture", "--out", "ev"]);
    // At 0.5: A has TP 1, FP 1; B has TP 2, FN 1; C is exact. Supports 1, 3, 1.
    let weighted = (2.0 / 3.0 + 3.0 * 0.8 + 1.0) / 5.0 * 100.0;
    let csv = fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert_eq!(
        csv,
        format!("model,F1_A,F1_B,F1_C,F1_D,F1_E,F1\nfixture,66.7,80.0,100.0,0.0,0.0,{weighted:.1}\n")
    );
    let preds = fs::read_to_string(d.join("ev/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 4);
    assert!(preds.lines().all(|l| l.contains("\"predicted\"")));
    let table = fs::read_to_string(d.join("ev/metrics.txt")).unwrap();
    assert!(table.lines().next().unwrap().split_whitespace().eq(["F1_A", "F1_B", "F1_C", "F1_D", "F1_E", "F1"]));
}

#[test]
fn calibrate_then_evaluate_uses_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Class A positives score 0.3 and 0.35, negatives lower: a 0.5 cut misses both.
    let lines = [
        row(1, [0.3, 0.9, 0.0, 0.0, 0.0], "AB", None),
        row(2, [0.35, 0.8, 0.0, 0.0, 0.0], "AB", None),
        row(3, [0.1, 0.7, 0.0, 0.0, 0.0], "B", None),
        row(4, [0.05, 0.6, 0.0, 0.0, 0.0], "B", None),
    ];
    fs::write(d.join("v.jsonl"), lines.join("\n")).unwrap();
    ok(d, &["calibrate", "--predictions", "v.jsonl", "--out", "t.json"]);
    let t: Vec<f64> = serde_json::from_str(&fs::read_to_string(d.join("t.json")).unwrap()).unwrap();
    assert!(t[0] >= 0.1 && t[0] < 0.3, "{t:?}");
    ok(d, &["evaluate", "--predictions", "v.jsonl", "--thresholds", "t.json", "--out", "ev"]);
    let csv = fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("model,100.0,100.0,"), "{csv}");
    assert!(d.join("t.json.manifest.json").exists());
}

#[test]
fn report_compare_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = [0.0; 5];
    // gold A, B, C, D; x errs on items 2 and 3, y on 3 and 4.
    let x = [row(1, s, "A", Some("A")), row(2, s, "B", Some("C")), row(3, s, "C", Some("A")), row(4, s, "D", Some("D"))];
    let y = [row(1, s, "A", Some("A")), row(2, s, "B", Some("B")), row(3, s, "C", Some("E")), row(4, s, "D", Some("CD"))];
    fs::write(d.join("x.jsonl"), x.join("\n")).unwrap();
    fs::write(d.join("y.jsonl"), y.join("\n")).unwrap();
    ok(d, &["report", "--compare", "x.jsonl", "y.jsonl", "--out", "rep"]);
    let overlap = fs::read_to_string(d.join("rep/overlap.csv")).unwrap();
    assert_eq!(overlap, "model,x.jsonl,y.jsonl\nx.jsonl,100.0,33.3\ny.jsonl,33.3,100.0\n");
    let hist = fs::read_to_string(d.join("rep/correct_models.csv")).unwrap();
    assert_eq!(hist, "models_correct,items\n0,1\n1,2\n2,1\n");

    let unthresholded = [row(1, s, "A", None), row(2, s, "B", None), row(3, s, "C", None), row(4, s, "D", None)];
    fs::write(d.join("z.jsonl"), unthresholded.join("\n")).unwrap();
    assert_eq!(code(&run(d, &["report", "--compare", "x.jsonl", "z.jsonl", "--out", "r2"])), 2);
    fs::write(d.join("w.jsonl"), x[..3].join("\n")).unwrap();
    assert_eq!(code(&run(d, &["report", "--compare", "x.jsonl", "w.jsonl", "--out", "r3"])), 2);
}

fn sha256(path: &Path) -> String {
    format!("{:x}", Sha256::digest(fs::read(path).unwrap()))
}

/// Output paths in a manifest are as given on the command line, relative to `cwd`.
fn check_manifest(cwd: &Path, manifest: &Path) {
    let m: Value = serde_json::from_str(&fs::read_to_string(cwd.join(manifest)).unwrap()).unwrap();
    let outputs = m["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for a in outputs {
        let p = cwd.join(a["path"].as_str().unwrap());
        assert_eq!(a["sha256"].as_str().unwrap(), sha256(&p), "{}", p.display());
        assert_eq!(a["bytes"].as_u64().unwrap(), fs::metadata(&p).unwrap().len());
    }
}

#[test]
fn ingest_and_tokenizer_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "raw", "--n", "500", "--seed", "4", "--out", "raw.json"]);
    for out in ["a", "b"] {
        ok(d, &["ingest", "--from-fixture", "raw.json", "--seed", "9", "--ratios", "0.8,0.1,0.1", "--out", &format!("{out}/split.jsonl")]);
        ok(d, &["tokenizer", "train", "--data", &format!("{out}/split.jsonl"), "--size", "200", "--out", &format!("{out}/vocab.txt")]);
    }
    for f in ["split.jsonl", "split.counts.csv", "vocab.txt"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let counts = fs::read_to_string(d.join("a/split.counts.csv")).unwrap();
    assert!(counts.starts_with("split,items,A,B,C,D,E\ntrain,"));
    let vocab = fs::read_to_string(d.join("a/vocab.txt")).unwrap();
    assert_eq!(vocab.lines().count(), 200);
    check_manifest(d, Path::new("a/split.jsonl.manifest.json"));
}

#[test]
fn fewshot_with_mock_clients() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "keyword", "--n", "1500", "--seed", "2", "--out", "split.jsonl"]);
    let common = ["fewshot", "--data", "split.jsonl", "--shots", "0,1,3", "--repetitions", "2", "--per-level", "2"];
    ok(d, &[&common[..], &["--out", "oracle"]].concat());
    let csv = fs::read_to_string(d.join("oracle/metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",100.0,100.0,100.0,100.0,100.0,100.0"), "{line}");
    }
    ok(d, &[&common[..], &["--mock-response", "B", "--out", "constant"]].concat());
    let responses = fs::read_to_string(d.join("constant/responses.jsonl")).unwrap();
    assert_eq!(responses.lines().count(), 3 * 2 * 10);
    let results: Value = serde_json::from_str(&fs::read_to_string(d.join("constant/results.json")).unwrap()).unwrap();
    let b = &results[0]["mean"]["per_class"][1];
    assert_eq!(b["recall"].as_f64().unwrap(), 1.0);
}

#[test]
fn divergence_exits_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "pattern", "--n", "40", "--out", "corpus.txt"]);
    ok(d, &["tokenizer", "train", "--corpus", "corpus.txt", "--size", "50", "--out", "vocab.txt"]);
    fs::write(
        d.join("run.toml"),
        "[model]\ncontext_width = 16\nembed_dim = 8\nhidden_dim = 16\nnum_blocks = 1\nnum_heads = 2\n\
         [pretrain]\nbatch_size = 4\naccumulation = 1\nwarmup_steps = 0\nlearning_rate = 1e300\n",
    )
    .unwrap();
    let out = run(d, &["--config", "run.toml", "pretrain", "--corpus", "corpus.txt", "--vocab", "vocab.txt", "--steps", "5", "--out", "pt"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pretrain_extend_and_explain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "keyword", "--n", "400", "--seed", "6", "--out", "split.jsonl"]);
    ok(d, &["tokenizer", "train", "--data", "split.jsonl", "--size", "120", "--out", "vocab.txt"]);
    fs::write(
        d.join("run.toml"),
        "seed = 3\n[model]\ncontext_width = 32\nembed_dim = 16\nhidden_dim = 32\nnum_blocks = 1\nnum_heads = 2\n\
         [pretrain]\nbatch_size = 4\naccumulation = 2\nwarmup_steps = 2\nlearning_rate = 1e-3\n",
    )
    .unwrap();
    let pre = ["--config", "run.toml", "pretrain", "--data", "split.jsonl", "--vocab", "vocab.txt", "--steps", "4"];
    ok(d, &[&pre[..], &["--out", "p1"]].concat());
    ok(d, &[&pre[..], &["--out", "p2"]].concat());
    assert_eq!(fs::read(d.join("p1/model.ckpt")).unwrap(), fs::read(d.join("p2/model.ckpt")).unwrap());
    assert_eq!(fs::read_to_string(d.join("p1/losses.csv")).unwrap().lines().count(), 5);

    ok(d, &["extend-context", "--in", "p1/model.ckpt", "--factor", "2", "--out", "ext.ckpt"]);
    let header = fs::read(d.join("ext.ckpt")).unwrap();
    let first = header.split(|&b| b == b'\n').next().unwrap();
    let h: Value = serde_json::from_slice(first).unwrap();
    assert_eq!(h["config"]["context_width"], 64);
    assert_eq!(code(&run(d, &["extend-context", "--in", "p1/model.ckpt", "--factor", "0", "--out", "x"])), 1);

    ok(d, &["explain", "--ckpt", "ext.ckpt", "--vocab", "vocab.txt", "--data", "split.jsonl", "--class", "B", "--baseline", "pad", "--steps", "8", "--limit", "6", "--out", "ex/b.jsonl"]);
    let rows = fs::read_to_string(d.join("ex/b.jsonl")).unwrap();
    for line in rows.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["target"], "B");
        assert!(!v["tokens"].as_array().unwrap().is_empty());
    }
    let table = fs::read_to_string(d.join("ex/b.txt")).unwrap();
    assert!(table.starts_with("rank"));
    assert_eq!(code(&run(d, &["explain", "--ckpt", "ext.ckpt", "--vocab", "vocab.txt", "--data", "split.jsonl", "--class", "Q", "--out", "q.jsonl"])), 1);
}

#[test]
fn toy_pipeline_end_to_end() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "raw", "--n", "900", "--seed", "8", "--out", "raw.json"]);
    ok(d, &["ingest", "--from-fixture", "raw.json", "--seed", "1", "--out", "split.jsonl"]);
    ok(d, &["tokenizer", "train", "--data", "split.jsonl", "--size", "300", "--out", "vocab.txt"]);
    fs::write(d.join("run.toml"), "[model]\ncontext_width = 64\n").unwrap();
    ok(d, &["--config", "run.toml", "finetune", "--data", "split.jsonl", "--vocab", "vocab.txt", "--lr", "1e-3", "--batch", "16", "--epochs", "4", "--seeds", "0", "--out", "ft"]);
    ok(d, &["calibrate", "--predictions", "ft/seed-0/validation_predictions.jsonl", "--out", "thresholds.json"]);
    ok(d, &["evaluate", "--predictions", "ft/seed-0/test_predictions.jsonl", "--thresholds", "thresholds.json", "--name", "toy", "--out", "eval"]);
    ok(d, &["baseline", "train", "--data", "split.jsonl", "--out", "tfidf.json"]);
    ok(d, &["baseline", "eval", "--data", "split.jsonl", "--model", "tfidf.json", "--out", "base"]);
    let table = ok(d, &["report", "--metrics", "base/metrics.json", "eval/metrics.json", "--compare", "base/test_predictions.jsonl", "eval/predictions.jsonl", "--out", "rep"]);
    assert!(table.contains("tf-idf") && table.contains("toy"));

    // calibrating the finetune output again reproduces its own thresholds and scores
    assert_eq!(
        fs::read(d.join("thresholds.json")).unwrap(),
        fs::read(d.join("ft/seed-0/thresholds.json")).unwrap()
    );
    let ours = fs::read_to_string(d.join("eval/metrics.csv")).unwrap();
    let theirs = fs::read_to_string(d.join("ft/metrics.csv")).unwrap();
    assert_eq!(ours.lines().nth(1).unwrap().replacen("toy", "seed 0", 1), theirs.lines().nth(1).unwrap());
    let f1: f64 = ours.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(f1 > 50.0, "{ours}");
    check_manifest(d, Path::new("ft/manifest.json"));
    assert!(start.elapsed().as_secs() < 600);
}
