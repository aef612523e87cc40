use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn modesched(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modesched"))
        .args(args)
        .current_dir(root())
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn vehicle_optimize_writes_all_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = modesched(&["optimize", "configs/vehicle.json", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["iterates.csv", "schedule.json", "trajectory.csv", "d_field.csv", "manifest.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(out.join("iterates.csv")).unwrap();
    let costs = column(&csv, "J");
    assert!(!costs.is_empty() && costs.len() <= 50);
    assert!(costs.windows(2).all(|w| w[1] < w[0]), "{costs:?}");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["final_cost"].as_f64().unwrap() < manifest["initial_cost"].as_f64().unwrap());
    assert!(manifest["termination"]["reason"].is_string());
}

#[test]
fn malformed_config_exits_2_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let bad = write_config(tmp.path(), "bad.json", r#"{"model": {"type": "vehicle"}, "optimizer": {"alpha": 2.0}}"#);
    let o = modesched(&["optimize", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
    assert!(!out.exists());

    let broken = write_config(tmp.path(), "broken.json", "{\"model\": ");
    let o = modesched(&["optimize", broken.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());

    let unknown = write_config(tmp.path(), "unknown.json", r#"{"model": {"type": "vehicle"}, "horizn": 3}"#);
    let o = modesched(&["optimize", unknown.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_network_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "net.json",
        r#"{"model": {"type": "power", "network": "nowhere.json"}}"#,
    );
    let o = modesched(&["optimize", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.json"));
}

#[test]
fn dry_run_prints_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = modesched(&["optimize", "configs/vehicle.json", "--dry-run", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let cfg: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cfg["horizon"].as_f64(), Some(5.5));
    assert_eq!(cfg["initial_mode"].as_u64(), Some(2));
    assert_eq!(cfg["optimizer"]["j_max"].as_u64(), Some(40));
    assert!(!out.exists());

    let o = modesched(&["horizon", "configs/three_machine_horizon.json", "--dry-run"]);
    assert_eq!(o.status.code(), Some(0));
    let cfg: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cfg["x0"].as_array().unwrap().len(), 6);
}

#[test]
fn advance_longer_than_window_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(
        tmp.path(),
        "h.json",
        &format!(
            r#"{{"model": {{"type": "power", "network": "{}"}}, "mode": "horizon",
                "receding": {{"window": 1.0, "advance": 2.0, "iters_per_window": 1, "duration": 4.0}}}}"#,
            root().join("data/three_machine.json").display()
        ),
    );
    let o = modesched(&["horizon", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("advance"));
    assert!(!out.exists());
}

#[test]
fn horizon_baseline_shares_time_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(
        tmp.path(),
        "h.json",
        &format!(
            r#"{{"model": {{"type": "power", "network": "{}", "disturbance": 0.3}}, "mode": "horizon",
                "optimizer": {{"seed": 5}}, "samples": 50,
                "receding": {{"window": 1.0, "advance": 0.5, "iters_per_window": 1, "duration": 2.0}}}}"#,
            root().join("data/three_machine.json").display()
        ),
    );
    let o = modesched(&["horizon", cfg.to_str().unwrap(), "--baseline", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let b = std::fs::read_to_string(out.join("trajectory_baseline.csv")).unwrap();
    let ta = column(&a, "t");
    assert_eq!(ta, column(&b, "t"));
    assert_eq!(ta.len(), 51);
    assert_eq!(*ta.last().unwrap(), 2.0);
    let windows = std::fs::read_to_string(out.join("windows.csv")).unwrap();
    assert_eq!(windows.lines().count(), 1 + 4);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = modesched(&["optimize", "configs/vehicle.json", "--seed", "3", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        std::fs::read(out.join("iterates.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn directory_of_configs_runs_in_parallel() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("cfgs");
    std::fs::create_dir(&dir).unwrap();
    for (name, iters) in [("one", 2), ("two", 3)] {
        write_config(
            &dir,
            &format!("{name}.json"),
            &format!(r#"{{"model": {{"type": "vehicle"}}, "optimizer": {{"max_iter": {iters}}}}}"#),
        );
    }
    let out = tmp.path().join("out");
    let o = modesched(&["optimize", dir.to_str().unwrap(), "--jobs", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["one", "two"] {
        assert!(out.join(name).join("manifest.json").is_file());
    }
}
