use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"
[gen-synth]
out = "data/synth.emb"
group_counts = [450, 50, 50, 450]
dim = 32
seed = 7

[split]
input = "data/synth.emb"
out_dir = "data"
seed = 7

[probe-train]
method = "erm"
train = "data/train.emb"
val = "data/val.emb"
out = "probe.json"
seed = 7

[eval]
probe = "probe.json"
input = "data/test.emb"
out = "report.json"
csv_out = "report.csv"
"#;

fn corelens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corelens"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = corelens(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn run_pipeline(dir: &Path) {
    fs::write(dir.join("run.toml"), CONFIG).unwrap();
    for cmd in ["gen-synth", "split", "probe-train", "eval"] {
        ok(dir, &["--config", "run.toml", cmd]);
    }
}

/// Every file under `dir`, with the `meta` member removed from JSON artifacts.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let mut bytes = fs::read(&path).unwrap();
            let is_artifact_json = path.extension().is_some_and(|e| e == "json") && !path.to_string_lossy().ends_with(".meta.json");
            if is_artifact_json {
                let mut v: Value = serde_json::from_slice(&bytes).unwrap();
                assert!(v["meta"]["created_unix"].is_u64(), "{} lacks a timestamp", path.display());
                v.as_object_mut().unwrap().remove("meta");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            let key = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            files.insert(key, bytes);
        }
    }
    files
}

#[test]
fn config_driven_pipeline_reports_four_groups() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(dir.path());
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["per_group"].as_object().unwrap().len(), 4);
    assert_eq!(report["report"]["n_groups"], 4);
    assert_eq!(report["command"], "eval");
    assert_eq!(report["config_digest"].as_str().unwrap().len(), 64);

    let probe: Value = serde_json::from_slice(&fs::read(dir.path().join("probe.json")).unwrap()).unwrap();
    assert_eq!(probe["seed"], 7);
    assert_eq!(probe["train_config"]["epochs"], 1);

    let sidecar: Value = serde_json::from_slice(&fs::read(dir.path().join("data/train.emb.meta.json")).unwrap()).unwrap();
    assert_eq!(sidecar["provenance"]["command"], "split");
    assert_eq!(sidecar["provenance"]["seed"], 7);
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path());
    run_pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (name, bytes) in &sa {
        assert!(bytes == &sb[name], "{name} differs between runs");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(dir.path(), &["--config", "run.toml", "gen-synth", "--dim", "8", "--out", "small.emb"]);
    let bytes = fs::read(dir.path().join("small.emb")).unwrap();
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
    assert!(!dir.path().join("data/synth.emb").exists());
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Missing seed: configuration error.
    assert_eq!(corelens(d, &["gen-synth", "--out", "x.emb"]).status.code(), Some(2));
    // Unknown section.
    fs::write(d.join("bad.json"), r#"{"gen-synthh": {}}"#).unwrap();
    assert_eq!(corelens(d, &["--config", "bad.json", "gen-synth"]).status.code(), Some(2));

    ok(d, &["gen-synth", "--out", "a.emb", "--dim", "16", "--seed", "1"]);
    ok(d, &["gen-synth", "--out", "b.emb", "--dim", "8", "--seed", "1"]);
    ok(d, &["split", "--input", "a.emb", "--out-dir", "s", "--seed", "1"]);
    ok(d, &["probe-train", "--method", "dfr", "--train", "s/train.emb", "--val", "s/val.emb", "--seed", "1", "--epochs", "2", "--out", "p.json"]);
    // Probe width differs from the set: data error.
    let out = corelens(d, &["eval", "--probe", "p.json", "--input", "b.emb", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // Two identical background rows: rank error.
    let row = vec!["0.5"; 16].join(",");
    let header: Vec<String> = (0..16).map(|j| format!("d{j}")).collect();
    fs::write(d.join("bg.csv"), format!("{},label,attribute\n{row},0,0\n{row},0,0\n", header.join(","))).unwrap();
    let out = corelens(d, &["distill", "--input", "a.emb", "--background", "bg.csv", "--out", "o.emb"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn invert_grid_writes_a_square_success_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_corelens"))
        .current_dir(dir.path())
        .env("CORELENS_THREADS", "2")
        .args(["invert-grid", "--encoder-seed", "0", "--max-iter", "100", "--out", "grid.csv"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "initial\\target,cat,dog,cow,hen,fox,owl");
    for (i, line) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 7);
        assert!(cells[1..].iter().all(|c| *c == "0" || *c == "1"));
        // Starting at the target always recovers it.
        assert_eq!(cells[i + 1], "1");
    }
    let runs: Value = serde_json::from_slice(&fs::read(dir.path().join("grid.runs.json")).unwrap()).unwrap();
    assert_eq!(runs["runs"].as_array().unwrap().len(), 36);
    assert_eq!(runs["seed"], 0);

    let bad = Command::new(env!("CARGO_BIN_EXE_corelens"))
        .current_dir(dir.path())
        .env("CORELENS_THREADS", "zero")
        .args(["invert-grid", "--encoder-seed", "0", "--max-iter", "1", "--out", "g.csv"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn invert_reports_na_without_a_target_text() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-synth", "--out", "v.emb", "--dim", "32", "--seed", "3"]);
    ok(d, &["invert", "--encoder-seed", "0", "--initial-text", "ab", "--target-vector", "v.spur.emb", "--max-iter", "20", "--out", "inv.json"]);
    let v: Value = serde_json::from_slice(&fs::read(d.join("inv.json")).unwrap()).unwrap();
    assert_eq!(v["success"], "n/a");
    assert_eq!(v["loss_trace"].as_array().unwrap().len(), 20);
    let out = corelens(d, &["invert", "--encoder-seed", "0", "--initial-text", "ab", "--out", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_shot_probe_from_class_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-synth", "--out", "s.emb", "--dim", "4", "--seed", "2"]);
    // Class prompts pointing along -x and +x.
    fs::write(d.join("prompts.csv"), "d0,d1,d2,d3,label,attribute\n-1,0,0,0,0,0\n1,0,0,0,1,0\n").unwrap();
    ok(d, &["probe-train", "--method", "zeroshot", "--prompts", "prompts.csv", "--out", "zs.json"]);
    let probe: Value = serde_json::from_slice(&fs::read(d.join("zs.json")).unwrap()).unwrap();
    assert_eq!(probe["probe"]["provenance"], "zeroshot");
    assert_eq!(probe["seed"], Value::Null);
    ok(d, &["eval", "--probe", "zs.json", "--input", "s.emb", "--out", "r.json"]);
}
