use std::process::{Command, Output};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reverb-doa-lab")).args(args).output().expect("binary runs")
}

#[test]
fn simulate_writes_the_desk_recordings() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = lab(&["simulate", "--seed", "3", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("desk_3: 38 recordings"));
    assert!(dir.path().join("signals/desk_3.sig").exists());
    assert!(dir.path().join("signals/desk_3.json").exists());
    assert!(dir.path().join("manifest_simulate.json").exists());
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(lab(&["train", "--preset", "design", "--out", out]).status.code(), Some(2));
    assert_eq!(lab(&["report", "--preset", "test1", "--full", "--out", out]).status.code(), Some(2));
    assert_eq!(lab(&["train", "--alpha=-1", "--out", out]).status.code(), Some(2));
    assert_eq!(lab(&["train", "--J", "20", "--out", out]).status.code(), Some(2));
    assert_eq!(lab(&["frobnicate"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"seeed": 1}"#).unwrap();
    assert_eq!(lab(&["simulate", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(lab(&["simulate", "--config", missing.to_str().unwrap()]).status.code(), Some(3));
    let out = dir.path().to_str().unwrap();
    assert_eq!(lab(&["evaluate", "--method", "cnn", "--out", out]).status.code(), Some(3));
}

#[test]
fn config_file_values_are_used_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let out = dir.path().join("o");
    std::fs::write(&cfg, format!(r#"{{"seed": 4, "out": {:?}}}"#, out.to_str().unwrap())).unwrap();
    let o = lab(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "5"]);
    assert!(o.status.success());
    assert!(out.join("signals/desk_5.sig").exists());
    assert!(!out.join("signals/desk_4.sig").exists());
}

#[test]
fn design_simulation_needs_no_full_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["simulate", "--preset", "design", "--seed", "7", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("design_7: 370 recordings"));
}

#[test]
fn simulate_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let read = || std::fs::read(dir.path().join("signals/desk_2.sig")).unwrap();
    assert!(lab(&["simulate", "--seed", "2", "--out", out]).status.success());
    let first = read();
    assert!(lab(&["simulate", "--seed", "2", "--out", out]).status.success());
    assert_eq!(first, read());
}
