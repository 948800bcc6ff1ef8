use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use vlkd_cli::{parse_config, ConfigArgs};
use vlkd_core::config::RunConfig;
use vlkd_core::VlkdError;

fn vlkd(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlkd"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env_remove("VLKD_SEED")
        .output()
        .unwrap()
}

fn failure(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("a failure line");
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not JSON: {last}"))
}

fn config_key(err: vlkd_cli::CliError) -> String {
    match err {
        vlkd_cli::CliError::Core(VlkdError::Config { key, .. }) => key,
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn empty_file_yields_defaults() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), "{}").unwrap();
    let args = ConfigArgs {
        config: Some("c.json".into()),
        ..ConfigArgs::default()
    };
    assert_eq!(parse_config(&args, dir.path(), None).unwrap(), RunConfig::default());
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"distill": {"gamma": 20.0}, "seed": 3}"#).unwrap();
    let mut args = ConfigArgs {
        config: Some("c.json".into()),
        ..ConfigArgs::default()
    };
    let from_file = parse_config(&args, dir.path(), None).unwrap();
    assert_eq!((from_file.distill.gamma, from_file.seed), (20.0, 3));
    args.gamma = Some(500.0);
    args.set = vec!["distill.optim.epochs=2".into()];
    let cfg = parse_config(&args, dir.path(), Some("9")).unwrap();
    assert_eq!((cfg.distill.gamma, cfg.distill.optim.epochs, cfg.seed), (500.0, 2, 9));
    args.seed = Some(4);
    assert_eq!(parse_config(&args, dir.path(), Some("9")).unwrap().seed, 4);
}

#[test]
fn errors_name_the_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let with = |json: &str| {
        fs::write(dir.path().join("c.json"), json).unwrap();
        let args = ConfigArgs {
            config: Some("c.json".into()),
            ..ConfigArgs::default()
        };
        parse_config(&args, dir.path(), None).unwrap_err()
    };
    assert_eq!(config_key(with(r#"{"distill": {"optim": {"warmup_fraction": 1.5}}}"#)), "distill.optim.warmup_fraction");
    assert!(config_key(with(r#"{"distill": {"gamma_typo": 1}}"#)).starts_with("distill"));
    assert_eq!(config_key(with(r#"{"data": {"pairs": "many"}}"#)), "data.pairs");
    assert_eq!(config_key(with(r#"{"distill": {"disable": ["icti"]}}"#)), "distill.disable");
    assert_eq!(config_key(with("[1]")), "--config");
    let args = ConfigArgs::default();
    assert_eq!(config_key(parse_config(&args, dir.path(), Some("x")).unwrap_err()), "VLKD_SEED");
}

#[test]
fn presets_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = ConfigArgs {
        preset: Some("desk".into()),
        ..ConfigArgs::default()
    };
    assert_eq!(parse_config(&args, dir.path(), None).unwrap(), RunConfig::desk());
    args.preset = Some("huge".into());
    assert_eq!(config_key(parse_config(&args, dir.path(), None).unwrap_err()), "preset");
}

#[test]
fn selftest_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = vlkd(dir.path(), &["selftest"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.lines().count() > 5 && !stdout.contains("FAIL"));
    assert!(dir.path().join("reports/selftest.json").exists());
}

#[test]
fn distill_without_a_teacher_fails_with_a_reason() {
    let dir = tempfile::tempdir().unwrap();
    let out = vlkd(dir.path(), &["distill"]);
    assert!(!out.status.success());
    let f = failure(&out);
    assert_eq!(f["status"], "error");
    assert_eq!(f["reason"], "missing-teacher-checkpoint");
}

#[test]
fn bad_config_exits_nonzero_with_config_reason() {
    let dir = tempfile::tempdir().unwrap();
    let out = vlkd(dir.path(), &["--set", "distill.optim.warmup_fraction=1.5", "gen-data"]);
    assert!(!out.status.success());
    let f = failure(&out);
    assert_eq!(f["reason"], "config-error");
    assert!(f["detail"].as_str().unwrap().contains("distill.optim.warmup_fraction"));
}

#[test]
fn gen_data_writes_one_record_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vlkd"))
        .arg("--workdir")
        .arg(dir.path())
        .args(["--pairs", "37", "gen-data"])
        .env("VLKD_SEED", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    let train = fs::read_to_string(dir.path().join("data/train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 37);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["train_records"], 37);
    let again = tempfile::tempdir().unwrap();
    Command::new(env!("CARGO_BIN_EXE_vlkd"))
        .arg("--workdir")
        .arg(again.path())
        .args(["--pairs", "37", "--seed", "5", "gen-data"])
        .output()
        .unwrap();
    assert_eq!(fs::read_to_string(again.path().join("data/train.jsonl")).unwrap(), train);
}
