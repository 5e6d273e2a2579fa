use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

fn semheat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semheat")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: TempDir,
    bundle: PathBuf,
    map: PathBuf,
    root: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let bundle = root.join("b.shb");
        let map = root.join("m.shm");
        let out = semheat(&["attack", "--out", p(&bundle), "--save-map", p(&map), "--kinds", "pgd_linf,fgsm", "--json"]);
        let v = json(&out);
        assert_eq!(v["schema"], "semheat.attack/1");
        Fixture { _dir: dir, bundle, map, root }
    })
}

fn scratch(name: &str) -> PathBuf {
    let dir = fixture().root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn attack_bundle_validates() {
    let f = fixture();
    let v = json(&semheat(&["validate-bundle", p(&f.bundle), "--json"]));
    assert_eq!(v["valid"], true);
    assert_eq!(v["samples"], 6000);
    assert_eq!(v["perturbations"]["clean"], 2000);
    assert_eq!(v["perturbations"]["fgsm"], 2000);
}

#[test]
fn diff_of_identical_heatmaps_is_zero() {
    let f = fixture();
    let d = scratch("diff");
    let h = d.join("h.json");
    let out = semheat(&["heatmap", p(&f.bundle), "--map", p(&f.map), "--class", "0", "--filter", "clean", "--out", p(&h)]);
    assert!(out.status.success());
    let v = json(&semheat(&["diff", p(&h), p(&h), "--json"]));
    assert_eq!(v["kind"], "differential");
    let grid = v["grid"].as_array().unwrap();
    assert_eq!(grid.len(), 100);
    assert!(grid.iter().all(|c| c.as_f64() == Some(0.0)));
}

#[test]
fn binarize_and_render_text() {
    let f = fixture();
    let d = scratch("render");
    let h = d.join("h.json");
    let bin = d.join("b.json");
    assert!(semheat(&["heatmap", p(&f.bundle), "--map", p(&f.map), "--class", "class_1", "--out", p(&h)]).status.success());
    assert!(semheat(&["binarize", p(&h), "--t", "0.6", "--out", p(&bin)]).status.success());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&bin).unwrap()).unwrap();
    assert!(v["grid"].as_array().unwrap().iter().all(|c| c == 0.0 || c == 1.0));
    let out = semheat(&["render", p(&bin), "--format", "text"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("concept_0 [0]"));
    let svg = d.join("h.svg");
    assert!(semheat(&["render", p(&h), "--out", p(&svg), "--relevant-class", "1", "--bundle", p(&f.bundle)]).status.success());
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.contains("<svg") && text.trim_end().ends_with("</svg>"));
}

#[test]
fn localize_reports_every_sample() {
    let f = fixture();
    let v = json(&semheat(&["localize", p(&f.bundle), "--map", p(&f.map), "--json"]));
    let c = &v["counts"];
    let total: u64 = ["no_error", "encoder", "head", "oracle_unreliable"].iter().map(|k| c[k].as_u64().unwrap()).sum();
    assert_eq!(total, 6000);
    assert!(v["aligner_r_squared"].as_f64().unwrap() > 0.9);
    assert_eq!(v["by_perturbation"]["clean"]["encoder"], 0);
}

#[test]
fn detector_profile_round_trip() {
    let f = fixture();
    let d = scratch("detect");
    let profile = d.join("profile.json");
    let built = semheat(&["build-profile", p(&f.bundle), "--map", p(&f.map), "--out", p(&profile), "--json"]);
    assert_eq!(json(&built)["schema"], "semheat.build_profile/1");
    let eval = json(&semheat(&["evaluate-detector", p(&f.bundle), "--map", p(&f.map), "--profile", p(&profile), "--json"]));
    assert_eq!(eval["schema"], "semheat.evaluation/1");
    let out = semheat(&["detect", p(&f.bundle), "--map", p(&f.map), "--profile", p(&profile), "--part", "all"]);
    assert!(out.status.success());
    let lines: Vec<Value> =
        String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6000);
}

#[test]
fn fitted_map_round_trips_through_fit_aligner() {
    let f = fixture();
    let d = scratch("fit");
    let map = d.join("ls.shm");
    let v = json(&semheat(&["fit-aligner", p(&f.bundle), "--out", p(&map), "--json"]));
    assert_eq!(v["schema"], "semheat.fit/1");
    assert!(v["r_squared"].as_f64().unwrap() > 0.9);
    assert!(map.exists());
}

#[test]
fn bad_magic_exits_with_io_class_code() {
    let d = scratch("magic");
    let bad = d.join("x.shb");
    std::fs::write(&bad, b"garbage bytes").unwrap();
    let out = semheat(&["validate-bundle", p(&bad), "--json"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["schema"], "semheat.error/1");
    assert_eq!(err["code"], "bad_magic");
}

#[test]
fn missing_input_is_a_usage_error() {
    let out = semheat(&["validate-bundle"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[usage]"));
    assert_eq!(semheat(&["--threads", "0", "validate-bundle", "x"]).status.code(), Some(2));
    assert_eq!(semheat(&["heatmap", "--kind", "sideways"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let d = scratch("config");
    let cfg = d.join("c.toml");
    std::fs::write(&cfg, "treshold = 0.5\n").unwrap();
    let out = semheat(&["--config", p(&cfg), "validate-bundle", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad_config"));
}

#[test]
fn config_paths_stand_in_for_flags() {
    let f = fixture();
    let d = scratch("paths");
    let cfg = d.join("c.toml");
    std::fs::write(&cfg, format!("[paths]\nbundle = {:?}\nmap = {:?}\n", p(&f.bundle), p(&f.map))).unwrap();
    let v = json(&semheat(&["--config", p(&cfg), "localize", "--json"]));
    assert_eq!(v["schema"], "semheat.fault/1");
}
