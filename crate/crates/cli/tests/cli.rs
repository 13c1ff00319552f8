use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn kbcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbcnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kbcnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn make_benchmark(dir: &Path, pairs: usize) {
    ok(&[
        "make-synthetic",
        "--out",
        dir.to_str().unwrap(),
        "--pairs",
        &pairs.to_string(),
    ]);
}

#[test]
fn make_synthetic_writes_annotations_and_images() {
    let tmp = tempfile::tempdir().unwrap();
    make_benchmark(tmp.path(), 3);
    let text = fs::read_to_string(tmp.path().join("pairs.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["src_keypoints"].as_array().unwrap().len(), 8);
    assert!(first["trg_bbox"].is_object());
    assert_eq!(fs::read_dir(tmp.path().join("images")).unwrap().count(), 6);
}

#[test]
fn infer_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    make_benchmark(d, 3);
    let run = |name: &str, mode: &str| {
        let out = d.join(name);
        ok(&[
            "infer",
            "--pairs",
            d.join("pairs.jsonl").to_str().unwrap(),
            "--images",
            d.join("images").to_str().unwrap(),
            "--kbc",
            mode,
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]);
        fs::read(out).unwrap()
    };
    let a = run("a.jsonl", "off");
    let b = run("b.jsonl", "off");
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
    assert_eq!(run("c.jsonl", "src+trg"), run("d.jsonl", "src+trg"));
}

#[test]
fn evaluate_ground_truth_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    make_benchmark(d, 4);
    let identity = serde_json::json!({ "scale": 1.0, "offset": [0.0, 0.0], "applied": false });
    let mut preds = String::new();
    for line in fs::read_to_string(d.join("pairs.jsonl")).unwrap().lines() {
        let ann: Value = serde_json::from_str(line).unwrap();
        let n = ann["trg_keypoints"].as_array().unwrap().len();
        let rec = serde_json::json!({
            "pair_id": ann["pair_id"],
            "mode": "off",
            "keypoints": ann["trg_keypoints"],
            "valid": vec![true; n],
            "src_transform": identity,
            "trg_transform": identity,
        });
        preds.push_str(&format!("{rec}\n"));
    }
    fs::write(d.join("gt.jsonl"), preds).unwrap();
    let report = ok(&[
        "evaluate",
        "--pairs",
        d.join("pairs.jsonl").to_str().unwrap(),
        "--predictions",
        d.join("gt.jsonl").to_str().unwrap(),
    ]);
    let lines: Vec<Value> = report
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    let footer = lines.last().unwrap();
    assert_eq!(footer["summary"], true);
    let means = footer["mean"].as_array().unwrap();
    assert_eq!(means.len(), 3);
    assert!(means.iter().all(|m| m["pck"] == 1.0));
    for l in &lines[..4] {
        assert!(l["scores"]
            .as_array()
            .unwrap()
            .iter()
            .all(|s| s["pck"] == 1.0));
    }
}

#[test]
fn missing_inputs_fail_with_a_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    make_benchmark(d, 1);
    let out = kbcnet(&[
        "infer",
        "--pairs",
        d.join("pairs.jsonl").to_str().unwrap(),
        "--images",
        d.join("nowhere").to_str().unwrap(),
        "--out",
        d.join("p.jsonl").to_str().unwrap(),
    ]);
    let err = error_json(&out);
    assert_eq!(err["error"]["code"], "E_IO");
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("not found"));
}

#[test]
fn bad_annotations_fail_with_parse_error() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = tmp.path().join("pairs.jsonl");
    fs::write(&pairs, "{\"pair_id\": 3}\n").unwrap();
    let out = kbcnet(&[
        "evaluate",
        "--pairs",
        pairs.to_str().unwrap(),
        "--predictions",
        pairs.to_str().unwrap(),
    ]);
    assert_eq!(error_json(&out)["error"]["code"], "E_PARSE");
}

#[test]
fn invalid_threshold_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    make_benchmark(d, 1);
    let out = kbcnet(&[
        "infer",
        "--pairs",
        d.join("pairs.jsonl").to_str().unwrap(),
        "--images",
        d.join("images").to_str().unwrap(),
        "--threshold",
        "1.5",
        "--out",
        d.join("p.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(error_json(&out)["error"]["code"], "E_CONFIG");
}

#[test]
fn config_file_is_honoured() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "alphas = [0.2]\n").unwrap();
    let d = tmp.path();
    make_benchmark(d, 2);
    let preds = d.join("p.jsonl");
    ok(&[
        "infer",
        "--pairs",
        d.join("pairs.jsonl").to_str().unwrap(),
        "--images",
        d.join("images").to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    let report = ok(&[
        "evaluate",
        "--pairs",
        d.join("pairs.jsonl").to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    let footer: Value = serde_json::from_str(report.lines().last().unwrap()).unwrap();
    assert_eq!(footer["mean"].as_array().unwrap().len(), 1);
    assert_eq!(footer["mean"][0]["alpha"], 0.2);
}

#[test]
fn bench_prints_two_rows_and_a_ratio() {
    let text = ok(&[
        "bench-conv4d",
        "--size",
        "4",
        "--runs",
        "3",
        "--out-channels",
        "2",
    ]);
    assert!(text.lines().any(|l| l.starts_with("dense ")));
    assert!(text.lines().any(|l| l.starts_with("center-pivot ")));
    assert!(text.lines().any(|l| l.starts_with("speedup ")));
    let json = ok(&[
        "bench-conv4d",
        "--size",
        "4",
        "--runs",
        "3",
        "--out-channels",
        "2",
        "--json",
    ]);
    let v: Value = serde_json::from_str(json.trim()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn gradcheck_and_selftest_pass() {
    let g = ok(&["gradcheck"]);
    assert!(g.lines().last().unwrap().starts_with("max_rel_error"));
    let s = ok(&["selftest"]);
    assert!(s.lines().last().unwrap().ends_with("0 failed"));
    assert!(!s.contains("FAIL"));
}
