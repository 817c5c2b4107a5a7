//! Helpers shared by the CLI integration tests and the acceptance suite.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A model and data set small enough that the whole pipeline runs in
/// seconds.
pub const TINY_CONFIG: &str = r#"{
  "model": { "input_size": 8, "patch": 2, "embed_dim": 16, "depth": 2, "heads": 2, "window": 2, "mlp_ratio": 2.0 },
  "train": { "lr": 2e-3, "batch_size": 2, "epochs": 100, "max_steps": 6, "s2_lags": [2, 4] },
  "sampler": { "steps": 10 },
  "tiling": { "size": 12, "tile": 8, "overlap": 3 },
  "data": { "count": 4, "size": 8, "porosity": 0.45, "spread": 0.05, "corr_len": 1.5 },
  "lbm": { "max_steps": 3000, "check_interval": 50 }
}"#;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_poredit"))
}

pub fn poredit(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .env_remove("POREDIT_THREADS")
        .env("RUST_LOG", "off")
        .args(args)
        .output()
        .expect("spawn poredit")
}

/// Every subcommand on the tiny configuration with relative paths, so two
/// directories can be compared byte for byte. Returns the stdout of each
/// command keyed by its position.
pub fn run_pipeline(dir: &Path, threads: usize) -> BTreeMap<String, Vec<u8>> {
    fs::write(dir.join("tiny.json"), TINY_CONFIG).unwrap();
    let t = threads.to_string();
    let steps: &[&[&str]] = &[
        &["synth", "--out-dir", "data", "--seed", "3", "--report", "synth.json"],
        &["synth", "--out", "single.pdtv", "--seed", "4"],
        &["train", "--data", "data", "--out", "model.pdtc", "--log", "train.csv", "--report", "train.json"],
        &["sample", "--ckpt", "model.pdtc", "--porosity", "0.45", "--seed", "7", "--out", "s.pdtv", "--report", "runs/s.sample.json"],
        &["sample", "--ckpt", "model.pdtc", "--porosity", "0.45", "--seed", "7", "--eta", "0.5", "--guidance", "1.5", "--out", "ddim.pdtv"],
        &["sample-tiled", "--ckpt", "model.pdtc", "--porosity", "0.45", "--seed", "7", "--out", "t.pdtv", "--report", "tiled.json"],
        &["sample-tiled", "--ckpt", "model.pdtc", "--porosity", "0.45", "--seed", "7", "--noise", "independent", "--out", "ti.pdtv"],
        &["analyze", "--in", "data/vol_000.pdtv", "--clean", "--report", "runs/vol_000.analyze.json"],
        &["analyze", "--in", "s.pdtv"],
        &["lbm", "--in", "data/vol_000.pdtv", "--history", "lbm.csv", "--report", "runs/vol_000.lbm.json"],
        &["novelty", "--in", "s.pdtv", "--reference", "data", "--report", "novelty.json"],
        &["report", "--dir", "runs", "--out", "phi_k.csv"],
        &["report", "--dir", "runs"],
        &["repro-desk", "--quick", "--out-dir", "quick"],
    ];
    let mut out = BTreeMap::new();
    for (i, s) in steps.iter().enumerate() {
        let mut args = vec!["--threads", t.as_str(), "--config", "tiny.json"];
        args.extend_from_slice(s);
        let o = poredit(dir, &args);
        assert!(
            o.status.success(),
            "{:?} failed: {}",
            s,
            String::from_utf8_lossy(&o.stderr)
        );
        out.insert(format!("{i:02} {}", s[0]), o.stdout);
    }
    out
}

/// Relative path to contents for every file under `dir`.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Names of the entries that differ between two trees.
pub fn differences(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}
