use std::fs;
use std::path::PathBuf;

use consensus_sa::config::{ExperimentConfig, GossipSpec};
use consensus_sa::experiment::{self, RunOptions};
use consensus_sa::schedule::{ScheduleKind, StepSchedule};
use consensus_sa::Error;

fn shipped(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../cli/configs")
        .join(format!("{name}.json"));
    ExperimentConfig::load(&path).unwrap()
}

fn small(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.replicas = 3;
    cfg.horizon = 600;
    cfg
}

fn opts(dir: &tempfile::TempDir) -> RunOptions {
    RunOptions {
        out: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    }
}

#[test]
fn shipped_configs_validate() {
    for name in ["linear", "double_well"] {
        let report = experiment::cmd_validate(&shipped(name));
        assert!(report.all_pass(), "{name}:\n{}", report.render());
    }
}

#[test]
fn periodic_gossip_fails_validation() {
    let mut cfg = shipped("linear");
    cfg.gossip = GossipSpec::Explicit {
        matrix: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
    };
    let report = experiment::cmd_validate(&cfg);
    assert!(!report.all_pass());
    let gossip = &report.checks[0];
    assert!(gossip.detail.contains("spectral"), "{}", gossip.detail);
}

#[test]
fn track_is_deterministic() {
    let cfg = small(shipped("linear"));
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    experiment::cmd_track(&cfg, &opts(&a)).unwrap();
    experiment::cmd_track(&cfg, &opts(&b)).unwrap();
    for file in ["tracking.csv", "plot.csv", "summary.json", "config.json"] {
        let x = fs::read(a.path().join("track").join(file)).unwrap();
        let y = fs::read(b.path().join("track").join(file)).unwrap();
        assert_eq!(x, y, "{file}");
    }
}

#[test]
fn zero_noise_has_zero_noise_term() {
    let mut cfg = small(shipped("linear"));
    cfg.beta = 0.0;
    let dir = tempfile::tempdir().unwrap();
    let summary = experiment::cmd_track(&cfg, &opts(&dir)).unwrap();
    assert_eq!(summary.violations, 0);
    let csv = fs::read_to_string(dir.path().join("track/tracking.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "noise_term").unwrap();
    let mut rows = 0;
    for line in lines {
        let v: f64 = line.split(',').nth(col).unwrap().parse().unwrap();
        assert_eq!(v, 0.0);
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn simulate_writes_trajectory() {
    let cfg = small(shipped("double_well"));
    let dir = tempfile::tempdir().unwrap();
    let s = experiment::cmd_simulate(&cfg, &opts(&dir)).unwrap();
    assert_eq!(s.replicas, 3);
    let csv = fs::read_to_string(dir.path().join("simulate/trajectory.csv")).unwrap();
    // header + (horizon + 1) states × 3 nodes × 1 coordinate
    assert_eq!(csv.lines().count(), 1 + 601 * 3);
    assert!(csv.starts_with("n,t,node,coordinate,value\n"));
}

#[test]
fn bound_sweep_is_monotone() {
    let cfg = shipped("linear");
    let mut d = cfg.clone();
    d.d_override = Some(3e9);
    let dir = tempfile::tempdir().unwrap();
    let rows = experiment::cmd_bound(&d, &opts(&dir)).unwrap();
    let base: Vec<_> = rows.iter().filter(|r| r.scale == 1.0).collect();
    let doubled: Vec<_> = rows.iter().filter(|r| r.scale == 2.0).collect();
    assert_eq!(base.len(), 10);
    assert_eq!(doubled.len(), 10);
    for w in base.windows(2) {
        assert!(w[1].bound >= w[0].bound);
    }
    for (b, x) in base.iter().zip(&doubled) {
        assert_eq!(b.n0, x.n0);
        assert!(x.bound >= b.bound);
    }
    assert!(base.iter().any(|r| !r.vacuous));
    let csv = fs::read_to_string(dir.path().join("bound/bound.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn constant_schedule_bound_diverges() {
    let mut cfg = shipped("linear");
    cfg.schedule = StepSchedule::new(ScheduleKind::Constant { value: 0.05 });
    let dir = tempfile::tempdir().unwrap();
    let err = experiment::cmd_bound(&cfg, &opts(&dir)).unwrap_err();
    assert!(matches!(err, Error::Divergent(_)), "{err}");
}

#[test]
fn trap_needs_enough_conditioned_replicas() {
    let mut cfg = shipped("linear");
    cfg.replicas = 1;
    let dir = tempfile::tempdir().unwrap();
    let err = experiment::cmd_trap(&cfg, &opts(&dir)).unwrap_err();
    assert!(matches!(err, Error::InsufficientConditioning { conditioned: 1, required: 30 }), "{err}");
}

#[test]
fn large_noise_trap_is_flagged_vacuous() {
    let mut cfg = shipped("linear");
    cfg.beta = 1.0;
    cfg.replicas = 60;
    let dir = tempfile::tempdir().unwrap();
    let r = experiment::cmd_trap(&cfg, &opts(&dir)).unwrap();
    assert!(r.vacuous);
    assert_eq!(r.theoretical_bound, 0.0);
    assert!(r.conditioned >= 30);
    let text = fs::read_to_string(dir.path().join("trap/concentration.json")).unwrap();
    assert!(text.contains("\"schema_version\": 1"));
    assert!(text.contains("\"vacuous\": true"));
}

#[test]
fn overrides_are_applied() {
    let cfg = small(shipped("linear"));
    let dir = tempfile::tempdir().unwrap();
    let o = RunOptions {
        out: Some(dir.path().to_path_buf()),
        seed: Some(99),
        replicas: Some(2),
        horizon: Some(300),
    };
    let s = experiment::cmd_simulate(&cfg, &o).unwrap();
    assert_eq!((s.replicas, s.horizon), (2, 300));
    let snap = ExperimentConfig::load(&dir.path().join("simulate/config.json")).unwrap();
    assert_eq!(snap.master_seed, 99);
}
