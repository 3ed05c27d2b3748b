//! Exit-code and artifact contract of the `memtl` binary.

use std::process::Command;

use memtl::config::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_memtl"))
}

#[test]
fn init_config_writes_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    let st = bin()
        .args(["init-config", "--n-mts", "3", "--seed", "5", "--out"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let loaded = RunConfig::load(&cfg).unwrap();
    assert_eq!(loaded.ranges.n_mts, 3);
}

#[test]
fn missing_config_exits_5() {
    let st = bin()
        .args(["gen-data", "--config", "/nonexistent/config.json", "--out", "/tmp/x.jsonl"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(5));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    let mut run = RunConfig::default_for(2, 1);
    run.test_fraction = 2.0; // out of (0, 1)
    run.save(&cfg).unwrap();
    let st = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path().join("data.jsonl"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn unlabelable_ranges_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    let mut run = RunConfig::default_for(2, 1);
    // Deadlines no strategy can meet: huge jobs, slow CPUs, tiny theta.
    run.ranges.c = memtl::dataset::Interval::new(50.0, 60.0);
    run.ranges.theta = memtl::dataset::Interval::new(0.01, 0.02);
    run.count = 20;
    run.save(&cfg).unwrap();
    let st = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.path().join("data.jsonl"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
}

#[test]
fn missing_dataset_and_bundle_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    RunConfig::default_for(2, 1).save(&cfg).unwrap();
    let st = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--dataset", "/nonexistent/data.jsonl", "--kind", "mtfnn", "--out"])
        .arg(dir.path().join("bundle"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(5));

    // A real dataset but no trained bundle.
    let mut run = RunConfig::default_for(2, 1);
    run.count = 50;
    run.save(&cfg).unwrap();
    let data = dir.path().join("data.jsonl");
    let st = bin()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let st = bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .args(["--dataset"])
        .arg(&data)
        .args(["--model", "/nonexistent/bundle", "--out"])
        .arg(dir.path().join("eval.json"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(5));
}
