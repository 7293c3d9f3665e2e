use std::fs;
use std::path::Path;
use std::process::Command as Process;

use particle_heads::cli::{execute, CliError, Command, Invocation};

const TINY: &[&str] = &[
    "preset=desk",
    "train.total_steps=40",
    "train.checkpoints=10",
    "sgld.total_steps=30",
    "sgld.burn_in=15",
    "sgld.heads=0-1",
    "sgld.checkpoint_stride=4",
    "rollout.steps=20",
];

fn tiny(dir: &Path) -> Invocation {
    Invocation {
        config: None,
        overrides: TINY.iter().map(|s| s.to_string()).collect(),
        output: Some(dir.to_path_buf()),
        force: false,
    }
}

const PIPELINE: [Command; 8] = [
    Command::GenData,
    Command::Train,
    Command::AnalyzeHeads,
    Command::EstimateLlc,
    Command::FitPowerlaws,
    Command::Rollout,
    Command::TheoryLab,
    Command::Report,
];

#[test]
fn pipeline_is_deterministic_and_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for c in PIPELINE {
        execute(c, &tiny(&a), false).unwrap();
    }
    for c in PIPELINE {
        execute(c, &tiny(&b), false).unwrap();
    }
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    // The resolved config records the output directory; everything else must match.
    let strip = |m: &str| m.lines().filter(|l| !l.starts_with("config.resolved.toml,")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&manifest), strip(&fs::read_to_string(b.join("manifest.csv")).unwrap()));
    for rel in ["heads/head_1_3.csv", "report/summary.csv", "llc/head_0_1.csv", "theory/summary.csv", "rollout/energy.csv"] {
        assert!(manifest.contains(rel), "{rel} missing from manifest");
    }
    // Rerunning a stage in place rewrites identical bytes.
    execute(Command::Report, &tiny(&a), false).unwrap();
    assert_eq!(manifest, fs::read_to_string(a.join("manifest.csv")).unwrap());
}

#[test]
fn stages_need_their_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let err = execute(Command::Train, &tiny(tmp.path()), false).unwrap_err();
    assert!(matches!(err, CliError::MissingArtifact { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn changed_config_conflicts_unless_forced() {
    let tmp = tempfile::tempdir().unwrap();
    execute(Command::TheoryLab, &tiny(tmp.path()), false).unwrap();
    let mut other = tiny(tmp.path());
    other.overrides.push("train.lr=0.01".into());
    let err = execute(Command::TheoryLab, &other, false).unwrap_err();
    assert!(matches!(err, CliError::Conflict { .. }), "{err}");
    other.force = true;
    execute(Command::TheoryLab, &other, false).unwrap();
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_particle-heads");
    let ok = Process::new(bin).args(["--set", "preset=desk", "config"]).output().unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("model.embed_dim = 32"));

    let bad = Process::new(bin).args(["--set", "nope=1", "--set", "train.lr=x", "config"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(msg.contains("nope") && msg.contains("train.lr"), "{msg}");

    let missing = Process::new(bin).arg("--output").arg(tmp.path()).arg("analyze-heads").arg("-q").output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}
