use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_mmd-flagger");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("MMD_FLAGGER_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn schema(name: &str) -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(schema_name: &str, instance: &Value) {
    let validator = jsonschema::validator_for(&schema(schema_name)).unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{schema_name}: {errors:?}");
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// One-token bundle with scalar embeddings.
fn bundle(id: &str, labels: &[&str], beam: f64, blocks: &[(f64, &[f64])], logprob: f64) -> Value {
    json!({
        "id": id,
        "labels": labels,
        "source_text": "a b c d e",
        "beam": { "tokens": ["t"], "token_logprobs": [logprob], "vectors": [[beam]] },
        "blocks": blocks.iter().map(|(t, gens)| json!({
            "temperature": t,
            "generations": gens.iter().map(|v| json!({ "tokens": ["t"], "vectors": [[v]] })).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    })
}

fn write_jsonl(path: &Path, records: &[Value]) {
    let text: String = records.iter().map(|r| format!("{r}\n")).collect();
    fs::write(path, text).unwrap();
}

fn synth(dir: &Path, out: &str, args: &[&str]) {
    ok(dir, &[&["--out-dir", out, "synth"], args].concat());
}

#[test]
fn synth_is_reproducible_and_schema_valid() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "a", &["--correct", "3", "--hallucination", "3", "--seed", "7"]);
    synth(tmp.path(), "b", &["--correct", "3", "--hallucination", "3", "--seed", "7"]);
    let a = fs::read(tmp.path().join("a/synthetic.jsonl")).unwrap();
    assert_eq!(a, fs::read(tmp.path().join("b/synthetic.jsonl")).unwrap());
    let records = jsonl(&tmp.path().join("a/synthetic.jsonl"));
    assert_eq!(records.len(), 6);
    for r in &records {
        assert_valid("bundle.schema.json", r);
    }
    let meta: Value = serde_json::from_slice(&fs::read(tmp.path().join("a/synth.run.json")).unwrap()).unwrap();
    assert!(meta["rng"].as_str().unwrap().contains("ChaCha8"));
    assert_eq!(meta["config"]["seed"], 7);
}

#[test]
fn calibrate_percentile_and_empty_input() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "data", &["--correct", "4", "--n-per-temp", "5"]);
    ok(dir, &["--out-dir", "c25", "calibrate", "--input", "data/synthetic.jsonl"]);
    ok(dir, &["--out-dir", "c50", "calibrate", "--input", "data/synthetic.jsonl", "--percentile", "50"]);
    let read = |p: &str| -> Value { serde_json::from_slice(&fs::read(dir.join(p)).unwrap()).unwrap() };
    let (d25, d50) = (read("c25/calibration.json"), read("c50/calibration.json"));
    assert_valid("calibration.schema.json", &d25);
    assert_eq!(d25["groups"][0]["percentile"], 25.0);
    assert_eq!(d50["groups"][0]["percentile"], 50.0);
    assert!(d50["groups"][0]["gamma"].as_f64() > d25["groups"][0]["gamma"].as_f64());

    fs::write(dir.join("empty.jsonl"), "").unwrap();
    let out = run(dir, &["calibrate", "--input", "empty.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.join("calibration.json").exists());
}

#[test]
fn flag_requires_calibration_for_gaussian() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, ".", &["--hallucination", "2", "--n-per-temp", "4"]);
    let out = run(dir, &["flag", "--input", "synthetic.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing calibration"));
    let out = run(dir, &["flag", "--input", "synthetic.jsonl", "--aggregation", "concat", "--kernel", "linear"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn identical_generations_flag_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let grid: Vec<(f64, &[f64])> = (1..=10).map(|i| (f64::from(i) / 10.0, &[0.5, 0.5, 0.5][..])).collect();
    let records: Vec<Value> = (0..5).map(|i| bundle(&format!("s{i}"), &[], 0.5, &grid, -0.1)).collect();
    write_jsonl(&dir.join("same.jsonl"), &records);
    ok(dir, &["flag", "--input", "same.jsonl", "--kernel", "linear"]);
    let decisions = jsonl(&dir.join("decisions.jsonl"));
    assert_eq!(decisions.len(), 5);
    for d in &decisions {
        assert_valid("decision.schema.json", d);
        assert_eq!(d["flagged"], false);
        assert_eq!(d["tau_min"], 0.1);
    }
    let csv = fs::read_to_string(dir.join("trajectories.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0,")));
}

fn argmin_first(points: &[(f64, f64)]) -> f64 {
    let mut best = points[0];
    for &p in &points[1..] {
        if p.1 < best.1 {
            best = p;
        }
    }
    best.0
}

#[test]
fn smoothing_changes_only_moved_argmins() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "cal", &["--correct", "4", "--seed", "1", "--n-per-temp", "6"]);
    synth(dir, "data", &["--correct", "15", "--hallucination", "15", "--seed", "2", "--n-per-temp", "6"]);
    ok(dir, &["--out-dir", "cal", "calibrate", "--input", "cal/synthetic.jsonl"]);
    let flag = |out: &str, extra: &[&str]| {
        ok(
            dir,
            &[&["--out-dir", out, "flag", "--input", "data/synthetic.jsonl", "--calibration", "cal/calibration.json"], extra].concat(),
        );
        jsonl(&dir.join(out).join("decisions.jsonl"))
    };
    let raw = flag("raw", &[]);
    let smooth = flag("smooth", &["--smooth", "2"]);

    let mut raw_pts: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    let mut smooth_pts: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    let mut reader = csv_lines(&dir.join("smooth/trajectories.csv"));
    for row in reader.drain(..) {
        raw_pts.entry(row.0.clone()).or_default().push((row.1, row.2));
        if let Some(s) = row.3 {
            smooth_pts.entry(row.0).or_default().push((row.1, s));
        }
    }
    for (r, s) in raw.iter().zip(&smooth) {
        let id = r["id"].as_str().unwrap();
        assert_eq!(s["smoothing_window"], 2);
        assert_eq!(r["tau_min"].as_f64().unwrap(), argmin_first(&raw_pts[id]));
        assert_eq!(s["tau_min"].as_f64().unwrap(), argmin_first(&smooth_pts[id]));
        if argmin_first(&raw_pts[id]) == argmin_first(&smooth_pts[id]) {
            assert_eq!(r["flagged"], s["flagged"], "{id}");
            assert_eq!(r["tau_min"], s["tau_min"], "{id}");
        }
    }
}

fn csv_lines(path: &Path) -> Vec<(String, f64, f64, Option<f64>)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_owned(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().ok())
        })
        .collect()
}

#[test]
fn evaluate_reports_hand_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let grid: Vec<(f64, &[f64])> = vec![(0.1, &[0.0, 1.0][..]), (0.2, &[0.0, 1.0][..])];
    let truth = [
        ("a", vec!["error-full"]),
        ("b", vec!["error-strong"]),
        ("c", vec![]),
        ("d", vec![]),
        ("e", vec!["error-full", "error-omission"]),
    ];
    let records: Vec<Value> = truth.iter().map(|(id, l)| bundle(id, l, 0.0, &grid, -0.1)).collect();
    write_jsonl(&dir.join("truth.jsonl"), &records);
    // flagged: a (tp), c (fp); not flagged: b (fn), d (tn), e (fn)
    let decision = |id: &str, flagged: bool| {
        json!({"id": id, "tau_min": if flagged { 0.5 } else { 0.1 }, "flagged": flagged, "tau0": 0.11,
               "kernel": "linear", "aggregation": "avg", "estimator_mode": "unbiased"})
    };
    write_jsonl(
        &dir.join("decisions.jsonl"),
        &[decision("a", true), decision("b", false), decision("c", true), decision("d", false), decision("e", false)],
    );
    ok(dir, &["evaluate", "--input", "truth.jsonl", "--decisions", "decisions.jsonl"]);
    let report: Value = serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert_valid("report.schema.json", &report);
    let o = &report["overall"];
    assert_eq!((o["tp"].as_u64(), o["fp"].as_u64(), o["fn"].as_u64(), o["tn"].as_u64()), (Some(1), Some(1), Some(2), Some(1)));
    assert_eq!(o["recall"], 1.0 / 3.0);
    assert_eq!(o["precision"], 0.5);
    assert_eq!(o["per_label"]["error-full"]["tp"], 1);
    assert_eq!(o["per_label"]["error-full"]["fp"], 1);
    assert_eq!(report["labels"]["mixed_examples"], 1);
}

#[test]
fn seq_logprob_baseline_flags_bottom_forty_percent() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let grid: Vec<(f64, &[f64])> = vec![(0.1, &[0.0, 1.0][..])];
    let records: Vec<Value> = (0..10)
        .map(|i| bundle(&format!("r{i}"), &[], 0.0, &grid, -f64::from((i * 7) % 10) - 0.5))
        .collect();
    write_jsonl(&dir.join("b.jsonl"), &records);
    ok(dir, &["baseline", "--input", "b.jsonl", "--method", "seq-logprob"]);
    let text = fs::read_to_string(dir.join("baseline-seq-logprob.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,method,score,threshold,flagged"));
    let mut flagged: Vec<f64> = Vec::new();
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        if f[4] == "true" {
            flagged.push(f[2].parse().unwrap());
        }
    }
    flagged.sort_by(f64::total_cmp);
    assert_eq!(flagged, vec![-9.5, -8.5, -7.5, -6.5]);
}

#[test]
fn bad_records_exit_two_with_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let grid: Vec<(f64, &[f64])> = vec![(0.1, &[0.0, 1.0][..]), (0.2, &[0.0, 2.0][..])];
    let good = bundle("good", &[], 0.0, &grid, -0.1);
    let mut ragged = bundle("ragged", &[], 0.0, &grid, -0.1);
    ragged["blocks"][0]["generations"][1]["vectors"] = json!([[1.0, 2.0]]);
    let text = format!("{good}\nnot json\n{ragged}\n{good}\n");
    fs::write(dir.join("in.jsonl"), text).unwrap();
    let out = run(dir, &["flag", "--input", "in.jsonl", "--kernel", "linear"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(jsonl(&dir.join("decisions.jsonl")).len(), 1);
    let meta: Value = serde_json::from_slice(&fs::read(dir.join("flag.run.json")).unwrap()).unwrap();
    let lines: Vec<u64> = meta["record_errors"].as_array().unwrap().iter().map(|e| e["line"].as_u64().unwrap()).collect();
    assert_eq!(lines, vec![2, 3, 4]);
}

#[test]
fn per_lang_pair_calibration_rejects_unlabelled_bundles() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let grid: Vec<(f64, &[f64])> = vec![(0.1, &[0.2, 1.0][..]), (0.2, &[0.7, 3.0][..])];
    let mut a = bundle("a", &[], 0.0, &grid, -0.1);
    a["lang_pair"] = json!("de-en");
    let mut b = bundle("b", &[], 0.45, &grid, -0.1);
    b["lang_pair"] = json!("de-en");
    write_jsonl(&dir.join("cal.jsonl"), &[a, b]);
    ok(dir, &["calibrate", "--input", "cal.jsonl", "--scope", "per_lang_pair"]);
    write_jsonl(&dir.join("plain.jsonl"), &[bundle("c", &[], 0.0, &grid, -0.1)]);
    let out = run(dir, &["--out-dir", "f", "flag", "--input", "plain.jsonl", "--calibration", "calibration.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scope mismatch"));
}

#[test]
fn out_dir_env_and_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("run.toml"), "seed = 5\n").unwrap();
    let out = Command::new(BIN)
        .args(["--config", "run.toml", "synth", "--correct", "1", "--n-per-temp", "2"])
        .current_dir(dir)
        .env("MMD_FLAGGER_OUT_DIR", "envout")
        .output()
        .unwrap();
    assert!(out.status.success());
    let meta: Value = serde_json::from_slice(&fs::read(dir.join("envout/synth.run.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["seed"], 5);
    ok(dir, &["--config", "run.toml", "--out-dir", "flagout", "synth", "--correct", "1", "--n-per-temp", "2", "--seed", "9"]);
    let meta: Value = serde_json::from_slice(&fs::read(dir.join("flagout/synth.run.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["seed"], 9);
}

#[test]
fn plot_renders_one_line_per_example() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("t.csv"), "id,temperature,mmd2,smoothed\na,0.1,1,\na,0.2,0.5,\nb,0.1,0,\nb,0.2,0,\n").unwrap();
    ok(dir, &["plot", "--input", "t.csv"]);
    let svg = fs::read_to_string(dir.join("t.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    fs::write(dir.join("empty.csv"), "id,temperature,mmd2,smoothed\n").unwrap();
    ok(dir, &["plot", "--input", "empty.csv"]);
}

#[test]
fn help_lists_schema_paths() {
    let out = Command::new(BIN).arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for s in ["bundle.schema.json", "calibration.schema.json", "decision.schema.json", "report.schema.json"] {
        assert!(text.contains(s), "{s}");
        assert!(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(s).exists());
    }
}
