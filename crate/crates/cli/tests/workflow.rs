use std::path::Path;
use std::process::Command;

use dsarf_cli::checkpoint::{decode, encode, load_checkpoint, CheckpointError, VERSION};
use dsarf_cli::commands::{evaluate, predict, simulate, train, Mode};
use dsarf_cli::config::RunConfig;
use sha2::{Digest, Sha256};

fn small_config(extra: &[&str]) -> RunConfig {
    let mut keys = vec![
        "system=\"toy\"",
        "sim_sequences=8",
        "sim_steps=40",
        "sim_dim=5",
        "factors=2",
        "states=2",
        "lags=[1,2]",
        "epochs=4",
        "holdout_sequences=2",
        "seed=3",
    ];
    keys.extend_from_slice(extra);
    let keys: Vec<String> = keys.into_iter().map(String::from).collect();
    RunConfig::load(None, &keys).unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&[]);
    simulate(&cfg, &dir.path().join("sim")).unwrap();
    train(&cfg, &dir.path().join("sim/data.csv"), &dir.path().join("run"), None).unwrap();
    let bytes = read(&dir.path().join("run/checkpoint.bin"));
    let ck = decode(&bytes).unwrap();
    assert_eq!(encode(&ck), bytes);
    assert_eq!(load_checkpoint(&dir.path().join("run/checkpoint.bin")).unwrap(), ck);

    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x01;
    assert!(matches!(decode(&flipped), Err(CheckpointError::Checksum)));
    assert!(matches!(decode(&bytes[..bytes.len() - 5]), Err(CheckpointError::Checksum)));
    assert!(matches!(decode(b"not a checkpoint"), Err(CheckpointError::BadMagic)));

    // A well-formed file from another format version.
    let mut other = bytes[..bytes.len() - 32].to_vec();
    other[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let digest = Sha256::digest(&other);
    other.extend_from_slice(&digest);
    match decode(&other) {
        Err(CheckpointError::Version { found }) => assert_eq!(found, VERSION + 1),
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    simulate(&small_config(&[]), &p.join("sim")).unwrap();
    let data = p.join("sim/data.csv");
    train(&small_config(&["epochs=6"]), &data, &p.join("straight"), None).unwrap();
    train(&small_config(&["epochs=3"]), &data, &p.join("half"), None).unwrap();
    train(&small_config(&["epochs=6"]), &data, &p.join("resumed"), Some(&p.join("half/checkpoint.bin"))).unwrap();
    for file in ["checkpoint.bin", "elbo.csv", "states.csv", "config.toml"] {
        assert_eq!(read(&p.join("straight").join(file)), read(&p.join("resumed").join(file)), "{file}");
    }
    // Anything besides the epoch count must match the checkpoint.
    let err = train(&small_config(&["epochs=6", "learning_rate=0.02"]), &data, &p.join("bad"), Some(&p.join("half/checkpoint.bin")));
    assert!(err.is_err());
}

#[test]
fn chunked_training_maps_states_back() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cfg = small_config(&["holdout_sequences=0", "holdout_steps=10", "train_chunk=12"]);
    simulate(&cfg, &p.join("sim")).unwrap();
    train(&cfg, &p.join("sim/data.csv"), &p.join("run"), None).unwrap();
    let states = std::fs::read_to_string(p.join("run/states.csv")).unwrap();
    // 30 training steps cut into two chunks of 12 after dropping the first 6.
    let rows: Vec<&str> = states.lines().skip(1).collect();
    assert_eq!(rows.len(), 8 * 24);
    assert!(rows[0].starts_with("0,6,"));
    assert!(rows[23].starts_with("0,29,"));
    let report = predict(&p.join("run/checkpoint.bin"), &p.join("sim/data.csv"), Mode::Both, &[], &p.join("pred")).unwrap();
    assert!(report.contains_key("short_nrmse") && report.contains_key("long_nrmse"));
    let forecast = std::fs::read_to_string(p.join("pred/forecast_short.csv")).unwrap();
    assert_eq!(forecast.lines().count(), 1 + 8 * 10);
    assert!(forecast.lines().nth(1).unwrap().starts_with("0,30,"));
}

#[test]
fn evaluate_agrees_with_predict() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let cfg = small_config(&[]);
    simulate(&cfg, &p.join("sim")).unwrap();
    train(&cfg, &p.join("sim/data.csv"), &p.join("run"), None).unwrap();
    let report = predict(&p.join("run/checkpoint.bin"), &p.join("sim/data.csv"), Mode::Short, &[], &p.join("pred")).unwrap();
    let scored = evaluate(
        &p.join("pred/forecast_short.csv"),
        &p.join("sim/data.csv"),
        Some((&p.join("pred/states_short.csv"), &p.join("sim/states.csv"))),
    )
    .unwrap();
    let table: toml::Table = scored.parse().unwrap();
    let a = report["short_nrmse"].as_float().unwrap();
    let b = table["nrmse"].as_float().unwrap();
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    let acc = table["state_accuracy"].as_float().unwrap();
    assert!((50.0..=100.0).contains(&acc));
    // Forecast keys may change, model keys may not.
    predict(&p.join("run/checkpoint.bin"), &p.join("sim/data.csv"), Mode::Long, &["rollouts=5".into()], &p.join("p2")).unwrap();
    assert!(predict(&p.join("run/checkpoint.bin"), &p.join("sim/data.csv"), Mode::Short, &["states=3".into()], &p.join("p3")).is_err());
}

fn dsarf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dsarf")).args(args).output().unwrap()
}

#[test]
fn binary_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let config = p.join("run.toml");
    std::fs::write(&config, small_config(&[]).to_toml()).unwrap();
    let conf = config.to_str().unwrap();
    for run in ["a", "b"] {
        let out = p.join(run);
        let o = out.to_str().unwrap();
        let sim = format!("{o}/sim");
        let data = format!("{o}/sim/data.csv");
        let fit = format!("{o}/fit");
        let ck = format!("{o}/fit/checkpoint.bin");
        let pred = format!("{o}/pred");
        assert!(dsarf(&["simulate", "--config", conf, "--out", &sim]).status.success());
        assert!(dsarf(&["train", "--config", conf, "--data", &data, "--out", &fit]).status.success());
        let o = dsarf(&["predict", "--checkpoint", &ck, "--data", &data, "--mode", "both", "--out", &pred]);
        assert!(o.status.success());
        assert!(String::from_utf8_lossy(&o.stdout).contains("short-term NRMSE:"));
    }
    for file in [
        "sim/data.csv",
        "sim/states.csv",
        "fit/checkpoint.bin",
        "fit/elbo.csv",
        "fit/states.csv",
        "pred/forecast_short.csv",
        "pred/forecast_long_std.csv",
        "pred/report.toml",
    ] {
        assert_eq!(read(&p.join("a").join(file)), read(&p.join("b").join(file)), "{file}");
    }
}

#[test]
fn binary_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "2,3,2\n0,0,1.0\n").unwrap();
    let o = dsarf(&["train", "--data", bad.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = dsarf(&["simulate", "--set", "bogus=1", "--out", dir.path().join("y").to_str().unwrap()]);
    assert!(!o.status.success());
    let o = dsarf(&["evaluate", "--pred", "missing.csv", "--truth", "missing.csv"]);
    assert!(!o.status.success());
}
