use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tdiv_core::train::TrainConfig;

fn tdiv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdiv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("TDIV_CONFIG")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = TrainConfig::desk_small();
    cfg.dataset.n_train = 24;
    cfg.dataset.n_val = 8;
    cfg.cvae.epochs = 1;
    cfg.cvae.batch_size = 12;
    cfg.dsf.epochs = 1;
    cfg.dsf.batch_size = 12;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn read_tree(dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    let mut paths: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            read_tree(&p, out);
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
}

#[test]
fn help_lists_every_command_and_global_flag() {
    let out = tdiv(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for word in [
        "gen-scenes",
        "train-cvae",
        "train-dsf",
        "eval",
        "ablate",
        "sweep-lambda",
        "plot-scene",
        "dump-kernel",
        "--config",
        "--preset",
        "--seed",
    ] {
        assert!(text.contains(word), "missing {word}");
    }
    let sub = String::from_utf8(tdiv(&["train-dsf", "--help"]).stdout).unwrap();
    for flag in ["--backbone", "--lambda", "--fusion", "--branches", "--kernel"] {
        assert!(sub.contains(flag), "missing {flag}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(tdiv(&["--bogus"]).status.code(), Some(2));
    assert_eq!(tdiv(&["eval", "--sampler", "dsf"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = tdiv(&["--config", missing.to_str().unwrap(), "gen-scenes", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("absent");
    let out = tdiv(&["train-cvae", "--data", data.to_str().unwrap(), "--out", "m.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_scenes_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let read = |name: &str| {
        let out = dir.path().join(name);
        let status = tdiv(&["--config", &config, "--seed", "3", "gen-scenes", "--out", out.to_str().unwrap()]);
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let mut files = Vec::new();
        read_tree(&out, &mut files);
        files
    };
    let a = read("a");
    assert!(!a.is_empty());
    assert_eq!(a, read("b"));
}

#[test]
fn oracle_eval_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();
    assert!(tdiv(&["--config", &config, "gen-scenes", "--out", data_s]).status.success());
    let out = dir.path().join("eval");
    let res = tdiv(&["--config", &config, "eval", "--data", data_s, "--sampler", "oracle", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let json = fs::read_to_string(out.join("eval-oracle.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["sampler"], "oracle");
    assert!(out.join("eval-oracle.csv").exists());
}
