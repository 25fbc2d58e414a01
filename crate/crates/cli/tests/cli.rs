use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn trajfm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajfm"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("error line on stderr");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {stderr}"))
}

fn gpx(points: &[(f64, f64, u32)]) -> String {
    let body: String = points
        .iter()
        .map(|(lat, lon, s)| format!(r#"<trkpt lat="{lat}" lon="{lon}"><time>2021-05-01T08:{:02}:{:02}Z</time></trkpt>"#, s / 60, s % 60))
        .collect();
    format!(r#"<?xml version="1.0"?><gpx version="1.1" creator="test"><trk><name>t</name><trkseg>{body}</trkseg></trk></gpx>"#)
}

fn track(n: u32, lat0: f64) -> Vec<(f64, f64, u32)> {
    (0..n).map(|i| (lat0 + i as f64 * 9e-5, 116.3, i)).collect()
}

fn jsonl_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn ingest_empty_directory_writes_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("gpx")).unwrap();
    let out = trajfm(dir.path(), &["ingest", "--input", "gpx", "--output", "raw.jsonl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(jsonl_lines(&dir.path().join("raw.jsonl")).is_empty());
    assert!(dir.path().join("raw.jsonl.config.json").exists());
}

#[test]
fn ingest_skips_corrupt_files_and_applies_sidecar_meta() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("gpx");
    fs::create_dir(&g).unwrap();
    fs::write(g.join("a.gpx"), gpx(&track(50, 39.9))).unwrap();
    fs::write(g.join("a.json"), r#"{"mode":"bike"}"#).unwrap();
    fs::write(g.join("b.gpx"), gpx(&track(40, 39.95))).unwrap();
    fs::write(g.join("c.gpx"), "<gpx><trk>").unwrap();
    let out = trajfm(dir.path(), &["ingest", "--input", "gpx", "--output", "raw.jsonl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["files"], 3);
    assert_eq!(summary["failed_files"], 1);
    let lines = jsonl_lines(&dir.path().join("raw.jsonl"));
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["meta"]["mode"], "bike");
    assert_eq!(lines[1]["points"].as_array().unwrap().len(), 40);
}

#[test]
fn exit_codes_distinguish_io_config_and_contract() {
    let dir = tempfile::tempdir().unwrap();
    let missing = trajfm(dir.path(), &["preprocess", "--input", "nope.jsonl", "--output", "x.jsonl"]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(error_json(&missing)["error"]["kind"], "io");

    let unknown = trajfm(dir.path(), &["synth", "--output", "s.jsonl", "--set", "model.depth=3"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert_eq!(error_json(&unknown)["error"]["kind"], "config");

    let bad_flag = trajfm(dir.path(), &["synth", "--frobnicate"]);
    assert_eq!(bad_flag.status.code(), Some(1));
    assert_eq!(error_json(&bad_flag)["exit_code"], 1);

    fs::write(dir.path().join("bad.jsonl"), "{\"id\":\"x\",\"points\":[[1.0,2.0,5.0],[1.0,2.0,4.0]]}\n").unwrap();
    let contract = trajfm(dir.path(), &["preprocess", "--input", "bad.jsonl", "--output", "x.jsonl"]);
    assert_eq!(contract.status.code(), Some(2));
    assert_eq!(error_json(&contract)["error"]["kind"], "contract");
}

#[test]
fn help_lists_config_keys_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = trajfm(dir.path(), &["pretrain", "--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["filter.min_points", "model.lr", "mask.mask_ratio", "synth.noise_sigma_m", "resample.n_max", "seed"] {
        assert!(text.contains(key), "missing {key} in help:\n{text}");
    }
    assert!(text.contains("0.001"));
}

#[test]
fn pipeline_eval_tasks_and_mask_preview() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let common = ["--seed", "3", "--set", "synth.n_traj=12", "--set", "model.epochs=1"];
    let run = |args: &[&str]| {
        let all: Vec<&str> = args.iter().chain(common.iter()).copied().collect();
        let out = trajfm(d, &all);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    run(&["synth", "--output", "raw.jsonl"]);
    run(&["preprocess", "--input", "raw.jsonl", "--output", "clean.jsonl"]);
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("clean.jsonl.report.json")).unwrap()).unwrap();
    assert_eq!(report["kept"], 12);
    assert!(report["run_config"]["model"]["d_model"].is_number());

    run(&["pretrain", "--input", "clean.jsonl", "--checkpoint", "m.json"]);
    let csv = fs::read_to_string(d.join("m.json.loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,train_loss,val_loss"));
    assert_eq!(csv.lines().count(), 3);

    for task in ["recovery", "prediction"] {
        let out_file = format!("{task}.json");
        let out = run(&["eval", "--task", task, "--input", "clean.jsonl", "--checkpoint", "m.json", "--output", &out_file, "--reference", "raw.jsonl"]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("mae_m"));
        let m: Value = serde_json::from_str(&fs::read_to_string(d.join(&out_file)).unwrap()).unwrap();
        assert_eq!(m["task"], task);
        assert_eq!(m["n_trajectories"], 12);
        assert!(m["mae_m"].as_f64().unwrap() > 0.0);
        assert!(m["rmse_m"].as_f64().unwrap() >= m["mae_m"].as_f64().unwrap());
        assert!(m["density_jsd"].as_f64().unwrap() >= 0.0);
        if task == "prediction" {
            assert_eq!(m["n_points"], 60);
        }
    }

    let out = run(&["mask-preview", "--input", "clean.jsonl", "--strategy", "last-n", "--limit", "3"]);
    let lines: Vec<Value> = String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        let n = l["n"].as_u64().unwrap();
        let masked: Vec<u64> = l["masked"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        assert_eq!(*masked.last().unwrap(), n - 1);
        assert!(!masked.contains(&0));
    }
}
