use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use guidewalk_core::diagnostics::MetricReport;
use guidewalk_service::plans::InterpManifest;
use serde_json::{json, Value};

fn guidewalk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guidewalk"))
        .args(args)
        .env_remove("GUIDEWALK_STORE")
        .env_remove("GUIDEWALK_MODELS")
        .output()
        .unwrap()
}

fn doc(dir: &Path, name: &str, value: Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, value.to_string()).unwrap();
    p.to_string_lossy().into_owned()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().flatten().map(|e| e.path()).collect();
    out.sort();
    out
}

#[test]
fn unguided_two_styles_run_writes_sixteen_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = doc(tmp.path(), "run.json", json!({
        "model": "two_styles_2d",
        "sampler": {"kind": "ddpm", "steps": 50, "seed": 3},
        "outputs": {"samples": 16}
    }));
    let store = tmp.path().join("store");
    let out = stdout_json(&guidewalk(&["sample", &spec, "--out", store.to_str().unwrap()]));
    let dir = PathBuf::from(out["dir"].as_str().unwrap());
    assert_eq!(dir.file_name().unwrap().to_str().unwrap(), out["run_id"].as_str().unwrap());
    assert_eq!(files(&dir.join("samples")).len(), 16);
    assert!(dir.join("manifest.json").is_file());
    assert!(dir.join("runspec.json").is_file());
}

#[test]
fn store_can_come_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = doc(tmp.path(), "run.json", json!({"model": "two_styles_2d", "sampler": {"kind": "ddim", "steps": 5, "seed": 1}}));
    let out = Command::new(env!("CARGO_BIN_EXE_guidewalk"))
        .args(["sample", &spec])
        .env("GUIDEWALK_STORE", tmp.path().join("env-store"))
        .output()
        .unwrap();
    let v = stdout_json(&out);
    assert!(tmp.path().join("env-store").join(v["run_id"].as_str().unwrap()).is_dir());
}

#[test]
fn same_spec_gives_byte_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = doc(tmp.path(), "run.json", json!({
        "model": "bands_32x32",
        "terms": [{"condition": "base", "temporal": {"kind": "ramp_down", "m": 2.0}},
                  {"condition": "style", "temporal": {"kind": "ramp_up", "m": 4.0, "a": 0.6}}],
        "sampler": {"kind": "ddpm", "steps": 40, "seed": 17},
        "outputs": {"samples": 3, "record_trajectory": true, "trajectory_stride": 5, "emit": ["fields", "images", "normmaps", "metrics"]}
    }));
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let store = tmp.path().join(name);
        let v = stdout_json(&guidewalk(&["sample", &spec, "--out", store.to_str().unwrap()]));
        dirs.push(PathBuf::from(v["dir"].as_str().unwrap()));
    }
    let list = |d: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in files(d) {
            if sub.is_dir() {
                for f in files(&sub) {
                    out.push((f.strip_prefix(d).unwrap().to_path_buf(), std::fs::read(&f).unwrap()));
                }
            } else {
                out.push((sub.strip_prefix(d).unwrap().to_path_buf(), std::fs::read(&sub).unwrap()));
            }
        }
        out
    };
    let (a, b) = (list(&dirs[0]), list(&dirs[1]));
    assert!(a.len() > 20);
    assert_eq!(a, b);
}

#[test]
fn missing_null_condition_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    doc(tmp.path(), "model.json", json!({
        "shape": {"flat": 2},
        "conditions": [{"id": "base", "components": [{"mean": [1.0, 0.0], "variance": 1.0}]}]
    }));
    let spec = doc(tmp.path(), "run.json", json!({"model": "model.json", "sampler": {"kind": "ddpm", "steps": 5, "seed": 1}}));
    let out = guidewalk(&["sample", &spec, "--out", tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing null condition"));
}

#[test]
fn schema_error_exits_2_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = doc(tmp.path(), "run.json", json!({
        "model": "two_styles_2d",
        "terms": [{"condition": "base", "temporal": {"kind": "ramp_up", "m": 1.0}}],
        "sampler": {"kind": "ddpm", "steps": 5, "seed": 1}
    }));
    let out = guidewalk(&["sample", &spec, "--out", tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("$.terms[0].temporal"));
}

#[test]
fn unusable_store_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = doc(tmp.path(), "run.json", json!({"model": "two_styles_2d", "sampler": {"kind": "ddpm", "steps": 5, "seed": 1}}));
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let out = guidewalk(&["sample", &spec, "--out", blocker.join("store").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

fn reports(out: &Output) -> Vec<MetricReport> {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn gaussian_oracle_suite_passes_on_effective_mean_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = doc(tmp.path(), "run.json", json!({
        "model": "two_styles_2d",
        "terms": [{"condition": "base", "temporal": {"kind": "constant", "m": 2.0}},
                  {"condition": "style_A", "temporal": {"kind": "constant", "m": -0.5}}],
        "sampler": {"kind": "ddpm", "steps": 200, "seed": 8},
        "outputs": {"samples": 4096}
    }));
    let store = tmp.path().join("store");
    let v = stdout_json(&guidewalk(&["sample", &spec, "--out", store.to_str().unwrap()]));
    let dir = v["dir"].as_str().unwrap();
    let out = guidewalk(&["diagnose", dir, "--suite", "gaussian_oracle"]);
    assert_eq!(out.status.code(), Some(0));
    let r = reports(&out);
    assert!(r.iter().all(|r| r.pass) && r[0].value <= 0.1, "{r:?}");

    let out = guidewalk(&["diagnose", dir, "--suite", "unconditional"]);
    assert_eq!(out.status.code(), Some(2), "guided runs are not unconditional");
    let out = guidewalk(&["diagnose", dir, "--suite", "no_such_suite"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failing_metric_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    // Too few steps for the sampled mean to reach its target.
    let spec = doc(tmp.path(), "run.json", json!({
        "model": "two_styles_2d",
        "terms": [{"condition": "base", "temporal": {"kind": "constant", "m": 4.0}}],
        "sampler": {"kind": "ddpm", "steps": 2, "beta_min": 0.01, "beta_max": 0.02, "seed": 8},
        "outputs": {"samples": 256}
    }));
    let store = tmp.path().join("store");
    let v = stdout_json(&guidewalk(&["sample", &spec, "--out", store.to_str().unwrap()]));
    let out = guidewalk(&["diagnose", v["dir"].as_str().unwrap(), "--suite", "gaussian_oracle"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!reports(&out)[0].pass);
}

#[test]
fn interpolation_endpoints_match_single_style_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let base = json!({
        "model": "bands_32x32",
        "terms": [{"condition": "base", "temporal": {"kind": "constant", "m": 1.5}}],
        "sampler": {"kind": "ddpm", "steps": 30, "seed": 12},
        "outputs": {"samples": 2}
    });
    let interp = doc(tmp.path(), "interp.json", json!({
        "base": base, "a": "style_A", "b": "style_B", "m": 3.0, "lambdas": [0.0, 0.5, 1.0],
        "style": {"temporal": {"kind": "ramp_up", "m": 1.0, "a": 0.8}}
    }));
    let store = tmp.path().join("store");
    let s = store.to_str().unwrap();
    let v = stdout_json(&guidewalk(&["interp", &interp, "--out", s]));
    let manifest: InterpManifest =
        serde_json::from_str(&std::fs::read_to_string(PathBuf::from(v["dir"].as_str().unwrap()).join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest.cells.len(), 3);
    for (cell, style) in [(&manifest.cells[0], "style_A"), (&manifest.cells[2], "style_B")] {
        let mut single = base.clone();
        single["terms"]
            .as_array_mut()
            .unwrap()
            .push(json!({"condition": style, "temporal": {"kind": "ramp_up", "m": 3.0, "a": 0.8}}));
        let spec = doc(tmp.path(), &format!("{style}.json"), single);
        let v = stdout_json(&guidewalk(&["sample", &spec, "--out", s]));
        assert_ne!(v["run_id"].as_str().unwrap(), cell.run_id);
        let single_dir = PathBuf::from(v["dir"].as_str().unwrap()).join("samples");
        let cell_dir = store.join(&cell.run_id).join("samples");
        for (a, b) in files(&single_dir).iter().zip(files(&cell_dir)) {
            assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
        }
    }
}

fn layout_walk(tmp: &Path, store: &str, ramped: bool) -> Vec<MetricReport> {
    let (base_t, style_t) = if ramped {
        (json!({"kind": "ramp_down", "m": 2.0}), json!({"kind": "ramp_up", "m": 0.0, "a": 0.6}))
    } else {
        (json!({"kind": "constant", "m": 2.0}), json!({"kind": "constant", "m": 0.0}))
    };
    let walk = doc(tmp, &format!("walk_{ramped}.json"), json!({
        "base": {
            "model": "bands_32x32",
            "terms": [{"condition": "base", "temporal": base_t}, {"condition": "style", "temporal": style_t}],
            "sampler": {"kind": "ddpm", "steps": 100, "seed": 0},
            "outputs": {"samples": 8}
        },
        "axes": [{"term": 1, "parameter": "magnitude", "values": [0.0, 2.0, 4.0]}]
    }));
    let v = stdout_json(&guidewalk(&["walk", &walk, "--out", store]));
    assert_eq!(v["run_ids"].as_array().unwrap().len(), 3);
    let out = guidewalk(&["diagnose", v["dir"].as_str().unwrap(), "--suite", "layout"]);
    reports(&out)
}

#[test]
fn ramped_walk_preserves_layout_better_at_full_magnitude() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");
    let s = store.to_str().unwrap();
    let constant = layout_walk(tmp.path(), s, false);
    let ramped = layout_walk(tmp.path(), s, true);
    assert_eq!(constant.len(), 2);
    let (c4, r4) = (constant[1].value, ramped[1].value);
    assert!(r4 < c4, "ramped {r4} vs constant {c4}");
}
