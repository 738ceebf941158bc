//! End-to-end runs of the `roadgps` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use roadgps::rfr::read_raster;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadgps"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().unwrap_or_default()).expect("json summary line")
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("error line");
    serde_json::from_str(line).expect("machine readable error")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Data {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Data {
    fn new(tiles: usize) -> Data {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let t = tiles.to_string();
        let out = run(&["synth", "--out", s(&root.join("data")), "--tiles", &t, "--size", "128", "--seed", "5"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Data { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn render(&self, out: &str, extra: &[&str]) -> Output {
        let (input, tiles, out) = (self.path("data/samples.csv"), self.path("data/tiles.json"), self.path(out));
        let mut args = vec!["render", "--input", s(&input), "--tiles", s(&tiles), "--out", s(&out)];
        args.extend_from_slice(extra);
        run(&args)
    }
}

#[test]
fn synth_writes_dataset_layout() {
    let d = Data::new(2);
    for f in ["samples.csv", "tiles.json", "synth.json", "labels/synth-000.png", "labels/synth-001.png"] {
        assert!(d.path("data").join(f).exists(), "{f}");
    }
}

#[test]
fn render_writes_two_channel_rasters_with_provenance() {
    let d = Data::new(2);
    let out = d.render("r", &[]);
    assert!(out.status.success());
    assert_eq!(stdout_json(&out)["channels"], 2);
    let (raster, prov) = read_raster(&d.path("r/synth-000.rfr")).unwrap();
    assert_eq!(raster.channel_names.len(), 2);
    assert_eq!(raster.channel_names[0], "gps_density");
    assert_eq!((raster.width(), raster.height()), (128, 128));
    let prov = prov.expect("provenance");
    assert_eq!(prov["command"], "render");
    assert!(prov["config"].get("out").is_none());
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let d = Data::new(1);
    let cfg = d.path("cfg.json");
    std::fs::write(&cfg, r#"{"mode": "gaussian", "kernel": 3, "unknown_key": 1}"#).unwrap();

    let out = d.render("a", &["--config", s(&cfg)]);
    assert!(out.status.success());
    let (_, prov) = read_raster(&d.path("a/synth-000.rfr")).unwrap();
    assert_eq!(prov.as_ref().unwrap()["config"]["kernel"], 3);
    assert_eq!(prov.as_ref().unwrap()["config"]["mode"], "gaussian");

    let out = d.render("b", &["--config", s(&cfg), "--kernel", "6"]);
    assert!(out.status.success());
    let (_, prov) = read_raster(&d.path("b/synth-000.rfr")).unwrap();
    assert_eq!(prov.unwrap()["config"]["kernel"], 6);

    let out = d.render("c", &[]);
    let (_, prov) = read_raster(&d.path("c/synth-000.rfr")).unwrap();
    assert_ne!(prov.unwrap()["config"]["kernel"], 6);
    assert!(out.status.success());
}

#[test]
fn render_is_byte_reproducible_and_verifiable() {
    let d = Data::new(1);
    assert!(d.render("r1", &["--mode", "gaussian"]).status.success());
    assert!(d.render("r2", &["--mode", "gaussian"]).status.success());
    let a = std::fs::read(d.path("r1/synth-000.rfr")).unwrap();
    assert_eq!(a, std::fs::read(d.path("r2/synth-000.rfr")).unwrap());

    let art = d.path("r1/synth-000.rfr");
    let ok = run(&["verify", "--artifact", s(&art), "--out", s(&d.path("scratch"))]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(stdout_json(&ok)["reproduced"], true);

    // changing the recorded input breaks reproduction
    let csv = d.path("data/samples.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    let kept: Vec<&str> = text.lines().step_by(2).collect();
    std::fs::write(&csv, kept.join("\n")).unwrap();
    let bad = run(&["verify", "--artifact", s(&art), "--out", s(&d.path("scratch2"))]);
    assert_eq!(bad.status.code(), Some(4));
    assert_eq!(error_json(&bad)["exit_code"], 4);
}

#[test]
fn augment_same_seed_same_bytes() {
    let d = Data::new(2);
    let (input, tiles) = (d.path("data/samples.csv"), d.path("data/tiles.json"));
    let go = |out: &str, seed: &str| {
        let out = d.path(out);
        let o = run(&["augment", "--input", s(&input), "--tiles", s(&tiles), "--out", s(&out), "--seed", seed]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.join("synth-001.rfr")).unwrap()
    };
    assert_eq!(go("a", "9"), go("b", "9"));
    assert_ne!(go("a", "9"), go("c", "10"));
}

#[test]
fn extract_sweep_and_eval_chain() {
    let d = Data::new(3);
    assert!(d.render("r", &[]).status.success());
    let (r, labels) = (d.path("r"), d.path("data/labels"));

    let sw = run(&["sweep", "--rasters", s(&r), "--labels", s(&labels), "--out", s(&d.path("sw")), "--kernels", "3,5", "--thresholds", "0.003,0.01,0.03"]);
    assert!(sw.status.success());
    let best = stdout_json(&sw);
    assert!(d.path("sw/sweep.csv").exists());
    let k = best["best"]["kernel_size"].to_string();
    let t = best["best"]["threshold"].to_string();

    let ex = run(&["extract-kde", "--rasters", s(&r), "--out", s(&d.path("m")), "--kernel", &k, "--threshold", &t]);
    assert!(ex.status.success());
    assert_eq!(stdout_json(&ex)["masks"], 3);

    let ev = run(&["eval-iou", "--pred", s(&d.path("m")), "--labels", s(&labels), "--tiles", s(&d.path("data/tiles.json")), "--out", s(&d.path("ev"))]);
    assert!(ev.status.success());
    let mean = stdout_json(&ev)["mean_iou"].as_f64().unwrap();
    // evaluating with the sweep's own optimum reproduces its score
    assert!((mean - best["mean_iou"].as_f64().unwrap()).abs() < 1e-12);
    let csv = std::fs::read_to_string(d.path("ev/eval.csv")).unwrap();
    assert!(csv.starts_with("tile_id,iou\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn stats_reports_counts_and_histograms() {
    let d = Data::new(1);
    let out = run(&["stats", "--input", s(&d.path("data/samples.csv")), "--out", s(&d.path("st"))]);
    assert!(out.status.success());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.path("st/stats.json")).unwrap()).unwrap();
    let lines = std::fs::read_to_string(d.path("data/samples.csv")).unwrap().lines().count() as u64;
    assert_eq!(report["sample_count"].as_u64(), Some(lines));
    assert!(report["interval_histogram"].as_array().is_some_and(|h| !h.is_empty()));
    assert!(d.path("st/interval_histogram.csv").exists());
}

#[test]
fn curve_writes_one_row_per_level() {
    let d = Data::new(10);
    let (input, tiles, labels, out) = (d.path("data/samples.csv"), d.path("data/tiles.json"), d.path("data/labels"), d.path("cv"));
    let o = run(&["curve", "--input", s(&input), "--tiles", s(&tiles), "--labels", s(&labels), "--out", s(&out), "--axis", "subsample_ratio", "--levels", "1,0.5,0.25"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(out.join("split.csv").exists());
}

#[test]
fn conv_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["conv-check", "--out", s(dir.path())]);
    assert!(out.status.success());
    assert!(dir.path().join("conv_check.json").exists());
}

#[test]
fn usage_errors_exit_two_with_error_line() {
    let d = Data::new(1);
    let missing = run(&["render", "--input", s(&d.path("nope.csv")), "--tiles", s(&d.path("data/tiles.json")), "--out", s(&d.path("x"))]);
    assert_eq!(missing.status.code(), Some(2));
    let err = error_json(&missing);
    assert_eq!(err["exit_code"], 2);
    assert!(err["message"].as_str().unwrap().contains("nope.csv"));

    assert_eq!(run(&["render", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));

    let bad = d.path("bad.json");
    std::fs::write(&bad, r#"{"kernel": "five"}"#).unwrap();
    assert_eq!(d.render("y", &["--config", s(&bad)]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_three() {
    let d = Data::new(1);
    std::fs::write(d.path("data/tiles.json"), "not json").unwrap();
    let out = d.render("r", &[]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["exit_code"], 3);
}
