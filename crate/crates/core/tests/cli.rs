mod common;

use std::path::Path;
use std::process::{Command, Output};

fn reftrack(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reftrack"))
        .args(args)
        .env("REFTRACK_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = reftrack(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn misspelled_config_key_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "[lit]\nstage1_iteratons = 5\n").unwrap();
    let o = reftrack(&["--config", cfg.to_str().unwrap(), "train-reference"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("reference.ckpt").exists());
}

#[test]
fn full_workflow_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("c.cfg");
    std::fs::write(&cfg, common::TINY_TOML).unwrap();
    let c = cfg.to_str().unwrap();

    let o = reftrack(&["train-reference", "--config", c, "--seed", "7"], d);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let reference = d.join("reference.ckpt");
    assert!(reference.exists());
    assert!(d.join("curves_reference.csv").exists());

    let r = reference.to_str().unwrap();
    let o = reftrack(&["train-policy", "--config", c, "--variant", "F", "--reference", r], d);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let policy = d.join("policy_F.ckpt");
    let p = policy.to_str().unwrap();

    // The robust checkpoint embeds everything it needs, so evaluation runs
    // with the reference file gone.
    let moved = d.join("elsewhere.ckpt");
    std::fs::rename(&reference, &moved).unwrap();
    for protocol in ["tracking", "payload", "push", "correlation"] {
        let o = reftrack(&["eval", protocol, "--config", c, "--policy", p], d);
        assert_eq!(o.status.code(), Some(0), "{protocol}: {}", stderr(&o));
    }
    let payload = std::fs::read_to_string(d.join("payload.csv")).unwrap();
    assert_eq!(payload.lines().count(), 3, "{payload}");

    let o = reftrack(&["replay", "--config", c, "--policy", p, "--steps", "30"], d);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let replay = std::fs::read_to_string(d.join("replay.csv")).unwrap();
    assert!(replay.starts_with("step,vx,vy,wz"));

    // Variant A needs no reference.
    let o = reftrack(&["train-policy", "--config", c, "--variant", "A"], d);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // Variant F without one is a usage error.
    let o = reftrack(&["train-policy", "--config", c, "--variant", "F"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_and_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("c.cfg");
    std::fs::write(&cfg, common::TINY_TOML).unwrap();
    let c = cfg.to_str().unwrap();
    let o = reftrack(&["train-policy", "--config", c, "--variant", "A"], d);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let policy = d.join("policy_A.ckpt");

    let bytes = std::fs::read(&policy).unwrap();
    let cut = d.join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
    let o = reftrack(&["eval", "tracking", "--config", c, "--policy", cut.to_str().unwrap()], d);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("corrupt"), "{}", stderr(&o));

    // Default config has a different fingerprint from the tiny one.
    let p = policy.to_str().unwrap();
    let o = reftrack(&["eval", "tracking", "--policy", p], d);
    assert_eq!(o.status.code(), Some(2));
    let active = reftrack::config::RunConfig::default().fingerprint();
    let trained = common::tiny().fingerprint();
    let msg = stderr(&o);
    assert!(msg.contains(&active) && msg.contains(&trained), "{msg}");

    let mut forced_cfg = common::tiny();
    forced_cfg.ppo.lr = 1e-3;
    let other = d.join("other.cfg");
    std::fs::write(&other, forced_cfg.to_toml()).unwrap();
    let o = reftrack(&["eval", "tracking", "--config", other.to_str().unwrap(), "--policy", p, "--force"], d);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
