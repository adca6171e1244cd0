use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures"), dir.path());
    dir
}

fn percsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_percsim"))
        .args(args)
        .current_dir(dir)
        .env_remove("PERCSIM_DATA_DIR")
        .output()
        .unwrap()
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().unwrap_or_default();
    serde_json::from_str(last).unwrap_or_else(|_| panic!("stderr: {stderr}"))
}

fn run_smoke_plan(dir: &Path) -> Value {
    ok_json(percsim(dir, &["run-plan", "plan.json"]))
}

#[test]
fn plan_trains_calibrates_and_writes_a_table() {
    let dir = workspace();
    let summary = run_smoke_plan(dir.path());
    assert_eq!(summary["ok"], true);
    let run = dir.path().join("run");
    for artifact in ["train/last.nckp", "train/best.nckp", "train/metrics.jsonl", "calibrated.nckp", "table.json"] {
        assert!(run.join(artifact).is_file(), "{artifact} missing");
        let sidecar: Value = serde_json::from_slice(&fs::read(run.join(format!("{artifact}.meta.json"))).unwrap()).unwrap();
        assert_eq!(sidecar["config_hash"].as_str().unwrap().len(), 64);
    }
    let table: Value = serde_json::from_slice(&fs::read(run.join("table.json")).unwrap()).unwrap();
    let labels: Vec<&str> = table["rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["PSNR", "SSIM", "CPIPS (calibrated)"]);
    let on_disk: Value = serde_json::from_slice(&fs::read(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(on_disk["steps"].as_array().unwrap().len(), 3);
}

#[test]
fn plan_reruns_are_bit_identical() {
    let (a, b) = (workspace(), workspace());
    run_smoke_plan(a.path());
    run_smoke_plan(b.path());
    for artifact in ["train/last.nckp", "calibrated.nckp", "table.json"] {
        let read = |d: &tempfile::TempDir| fs::read(d.path().join("run").join(artifact)).unwrap();
        assert!(read(&a) == read(&b), "{artifact} differs between runs");
    }
}

#[test]
fn failing_step_skips_the_rest_and_keeps_the_summary() {
    let dir = workspace();
    let plan = r#"{ "name": "broken", "output_dir": "run", "steps": [
        { "command": "distance", "args": ["--a", "missing.png", "--b", "missing.png", "--model", "none.nckp"] },
        { "command": "eval-2afc", "args": ["--baseline", "psnr", "--manifest", "twoafc/manifest.csv"] } ] }"#;
    fs::write(dir.path().join("broken.json"), plan).unwrap();
    let out = percsim(dir.path(), &["run-plan", "broken.json", "--json-errors"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "partial");
    let summary: Value = serde_json::from_slice(&fs::read(dir.path().join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["ok"], false);
    assert_eq!(summary["steps"][0]["status"], "failed");
    assert_eq!(summary["steps"][1]["status"], "skipped");
}

#[test]
fn errors_are_reported_as_json() {
    let dir = workspace();
    let usage = percsim(dir.path(), &["no-such-command", "--json-errors"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(error_json(&usage)["error"]["kind"], "usage");

    let missing = percsim(dir.path(), &["eval-2afc", "--baseline", "psnr", "--manifest", "absent.csv", "--json-errors"]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(error_json(&missing)["error"]["kind"], "io");

    let bad_kind = percsim(dir.path(), &["eval-2afc", "--baseline", "psnr", "--manifest", "twoafc/manifest.csv", "--kind", "xml", "--json-errors"]);
    assert_eq!(error_json(&bad_kind)["error"]["kind"], "config");

    let plain = percsim(dir.path(), &["eval-2afc", "--baseline", "psnr", "--manifest", "absent.csv"]);
    assert!(String::from_utf8_lossy(&plain.stderr).starts_with("error: "));
}

#[test]
fn data_dir_resolves_relative_inputs() {
    let dir = workspace();
    let elsewhere = tempfile::tempdir().unwrap();
    let out = percsim(
        elsewhere.path(),
        &["eval-2afc", "--baseline", "psnr", "--manifest", "twoafc/manifest.csv", "--data-dir", dir.path().to_str().unwrap()],
    );
    assert_eq!(ok_json(out)["triplets"], 12);
}

fn trained(dir: &Path) -> PathBuf {
    run_smoke_plan(dir);
    dir.join("run/calibrated.nckp")
}

#[test]
fn compress_decompress_and_distance_round_trip() {
    let dir = workspace();
    let model = trained(dir.path());
    let model = model.to_str().unwrap();
    let c = ok_json(percsim(dir.path(), &["compress", "--model", model, "--in", "images/img0.png", "--quality", "3", "--out", "x.cpip"]));
    assert!(c["bpp"].as_f64().unwrap() > 0.0);
    let d = ok_json(percsim(dir.path(), &["decompress", "--model", model, "--in", "x.cpip", "--out", "x.png"]));
    assert_eq!((d["width"].as_u64(), d["height"].as_u64(), d["quality"].as_u64()), (Some(32), Some(32), Some(3)));
    assert!(dir.path().join("x.png.meta.json").is_file());

    let dist = ok_json(percsim(dir.path(), &["distance", "--a", "images/img0.png", "--b", "images/img0.png", "--model", model]));
    assert_eq!(dist["total"].as_f64(), Some(0.0));
}

#[test]
fn rd_curve_feeds_bd_and_tables_convert() {
    let dir = workspace();
    let model = trained(dir.path());
    let rd = ok_json(percsim(dir.path(), &["rd-curve", "--model", model.to_str().unwrap(), "--images", "images", "--out", "rd.csv"]));
    assert_eq!(rd["points"].as_array().unwrap().len(), 1);
    let csv = fs::read_to_string(dir.path().join("rd.csv")).unwrap();
    assert!(csv.starts_with("label,bpp,psnr\nlearned,"));

    let curves = "label,bpp,psnr\na,0.1,20\na,0.2,23\na,0.4,26\na,0.8,29\nb,0.1,21\nb,0.2,24\nb,0.4,27\nb,0.8,30\n";
    fs::write(dir.path().join("curves.csv"), curves).unwrap();
    let bd = ok_json(percsim(dir.path(), &["bd", "--curves", "curves.csv", "--anchor", "a", "--test", "b"]));
    assert!((bd["bd_psnr_db"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(bd["bd_rate_percent"].as_f64().unwrap() < 0.0);

    let text = ok_json(percsim(dir.path(), &["export-tables", "--in", "run/table.json"]));
    assert!(text["rendered"].as_str().unwrap().contains("CPIPS (calibrated)"));
    ok_json(percsim(dir.path(), &["export-tables", "--in", "run/table.json", "--format", "csv", "--out", "t.csv"]));
    let back = ok_json(percsim(dir.path(), &["export-tables", "--in", "t.csv", "--format", "json"]));
    let parsed: Value = serde_json::from_str(back["rendered"].as_str().unwrap()).unwrap();
    assert_eq!(parsed["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn style_and_super_resolution_write_images_and_logs() {
    let dir = workspace();
    let model = trained(dir.path());
    let model = model.to_str().unwrap();
    fs::write(dir.path().join("style.json"), r#"{ "steps": 4 }"#).unwrap();
    let s = ok_json(percsim(
        dir.path(),
        &["style", "--content", "images/img0.png", "--style", "images/img1.png", "--model", model, "--config", "style.json", "--out", "st.png"],
    ));
    assert_eq!(s["steps"], 4);
    let trace = fs::read_to_string(dir.path().join("st.trace.jsonl")).unwrap();
    let totals: Vec<f64> = trace.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["total"].as_f64().unwrap()).collect();
    assert_eq!(totals.len(), 5);
    assert!(totals.windows(2).all(|w| w[1] <= w[0]));

    let sr = ok_json(percsim(dir.path(), &["sr-train", "--config", "sr.json", "--out", "sr"]));
    assert_eq!(sr["epochs"], 1);
    assert!(dir.path().join("sr/metrics.jsonl.meta.json").is_file());
    let up = ok_json(percsim(dir.path(), &["sr-infer", "--model", "sr/generator.nckp", "--in", "images/img1.png", "--out", "up.png"]));
    assert_eq!((up["width"].as_u64(), up["height"].as_u64()), (Some(128), Some(128)));
}

#[test]
fn cross_quality_plan_reports_the_gap() {
    let dir = workspace();
    let model = trained(dir.path());
    let cfg = serde_json::json!({
        "low": model, "high": model, "manifest": dir.path().join("twoafc/manifest.csv"), "output_dir": dir.path().join("cq"),
    });
    fs::write(dir.path().join("cq.json"), cfg.to_string()).unwrap();
    let out = ok_json(percsim(dir.path(), &["run-plan", "cross-quality", "--config", "cq.json"]));
    assert_eq!(out["gap"].as_f64(), Some(0.0));
    assert!(dir.path().join("cq/low.json").is_file() && dir.path().join("cq/high.json").is_file());
}
