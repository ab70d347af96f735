use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(format!("{name}.json"))
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_consensus-sa"))
        .args(args)
        .output()
        .unwrap()
}

fn write_variant(dir: &Path, name: &str, edit: impl FnOnce(&mut String)) -> PathBuf {
    let mut text = fs::read_to_string(config("linear")).unwrap();
    edit(&mut text);
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn validate_shipped_configs() {
    for name in ["linear", "double_well"] {
        let out = run(&["validate", "--config", config(name).to_str().unwrap()]);
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert_eq!(out.status.code(), Some(0), "{stdout}");
        assert!(!stdout.contains("FAIL"));
        assert!(stdout.contains("PASS  gossip"));
    }
}

#[test]
fn validate_periodic_gossip_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_variant(dir.path(), "periodic.json", |t| {
        *t = t.replace(
            r#"{"generator": "lazy_ring", "nodes": 5, "laziness": 0.5}"#,
            r#"{"generator": "explicit", "matrix": [[0, 1], [1, 0]]}"#,
        );
    });
    let out = run(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL  gossip") && stdout.contains("spectral"), "{stdout}");
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_variant(dir.path(), "typo.json", |t| {
        *t = t.replace("\"beta\"", "\"betta\": 1, \"beta\"");
    });
    let out = run(&["track", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("betta") && stderr.contains("line"), "{stderr}");
}

#[test]
fn missing_config_is_a_runtime_error() {
    let out = run(&["validate", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn track_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("linear");
    for sub in ["a", "b"] {
        let out_dir = dir.path().join(sub);
        let out = run(&[
            "track",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--replicas",
            "4",
            "--horizon",
            "800",
            "--seed",
            "5",
            "--workers",
            "2",
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["tracking.csv", "plot.csv", "summary.json", "config.json"] {
        let a = fs::read(dir.path().join("a/track").join(file)).unwrap();
        let b = fs::read(dir.path().join("b/track").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn trap_with_one_replica_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "trap",
        "--config",
        config("linear").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--replicas",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient conditioning"));
}

#[test]
fn bound_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "bound",
        "--config",
        config("linear").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("bound/bound.csv")).unwrap();
    assert!(csv.starts_with("n0,scale,delta_tilde,branch,series,bound,vacuous\n"));
    assert_eq!(csv.lines().count(), 21);
}
