use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn mmtomo(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmtomo"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn load(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(configs().join(name)).unwrap()).unwrap()
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bell_pipeline_reports_fidelity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("bell.json");
    for cmd in ["simulate", "fit", "reconstruct"] {
        let o = mmtomo(&[cmd], &cfg, tmp.path());
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("reconstruction.json")).unwrap()).unwrap();
    assert_eq!(doc["schema"], "mmtomo/1");
    assert_eq!(doc["kind"], "reconstructed_state");
    let f = doc["data"]["fidelity"].as_f64().unwrap();
    assert!(f > 0.8 && f <= 1.0, "{f}");
    let fock: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("fock.json")).unwrap()).unwrap();
    let values = fock["data"]["values"].as_array().unwrap();
    assert_eq!(values.len(), 16);
    let csv = std::fs::read_to_string(tmp.path().join("density.csv")).unwrap();
    assert!(csv.starts_with("row,col,re,im,sigma_re,sigma_im"));
    assert_eq!(csv.lines().count(), 17);
}

#[test]
fn noiseless_w_fit_gives_thirds() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = load("w_state.json");
    v["sampling"] = serde_json::json!({});
    let cfg = write_config(tmp.path(), &v);
    let out = tmp.path().join("out");
    for cmd in ["simulate", "fit"] {
        let o = mmtomo(&[cmd], &cfg, &out);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let csv = std::fs::read_to_string(out.join("fock.csv")).unwrap();
    for row in ["1,0,0,", "0,1,0,", "0,0,1,"] {
        let line = csv.lines().find(|l| l.starts_with(row)).unwrap();
        let p: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-6, "{line}");
    }
}

#[test]
fn calibration_recovers_injected_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mmtomo(&["calibrate", "--format", "json"], &configs().join("calibration.json"), tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("calibration.json")).unwrap()).unwrap();
    let phi_b = doc["data"]["phi_b_min"].as_f64().unwrap().to_degrees();
    assert!((phi_b - 110.0).abs() < 3.0, "{phi_b}");
    assert!(!tmp.path().join("calibration.csv").exists());
}

#[test]
fn zero_time_points_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = load("bell.json");
    v["readout"]["points"] = 0.into();
    let cfg = write_config(tmp.path(), &v);
    let o = mmtomo(&["simulate"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_calibration_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = load("bell.json");
    v["preparation"].as_object_mut().unwrap().remove("calibration");
    let cfg = write_config(tmp.path(), &v);
    let o = mmtomo(&["simulate"], &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("calibration"), "{}", stderr(&o));

    let o = mmtomo(&["calibrate"], &configs().join("bell.json"), tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_fields_and_schema_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = load("bell.json");
    v["schema"] = "mmtomo/0".into();
    let o = mmtomo(&["simulate"], &write_config(tmp.path(), &v), tmp.path());
    assert_eq!(o.status.code(), Some(2));

    let mut v = load("bell.json");
    v["shots"] = 10.into();
    let o = mmtomo(&["simulate"], &write_config(tmp.path(), &v), tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn incomplete_grid_lists_missing_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("bell.json");
    for cmd in ["simulate", "fit"] {
        assert!(mmtomo(&[cmd], &cfg, tmp.path()).status.success());
    }
    let path = tmp.path().join("q_manifest.json");
    let mut manifest: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let entries = manifest["data"]["entries"].as_array_mut().unwrap();
    entries.retain(|e| e["setting"] != serde_json::json!([0, -1]));
    std::fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
    let o = mmtomo(&["reconstruct"], &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("[0, -1]"), "{}", stderr(&o));
}

#[test]
fn seed_override_changes_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("bell.json");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(mmtomo(&["simulate"], &cfg, &a).status.success());
    assert!(mmtomo(&["simulate", "--seed", "8"], &cfg, &b).status.success());
    let read = |d: &Path| std::fs::read(d.join("scan.json")).unwrap();
    assert_ne!(read(&a), read(&b));
}

#[test]
fn fit_explicit_scan_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("bell.json");
    assert!(mmtomo(&["simulate"], &cfg, tmp.path()).status.success());
    let scan = tmp.path().join("grid/scan_p0_p0.json");
    let out = tmp.path().join("single");
    let o = mmtomo(&["fit", "--scan", scan.to_str().unwrap()], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("scan_p0_p0.fock.json").exists());
}
