//! Runs the `forge` binary inside scratch directories.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const EPOCH: &str = "1700000000";

pub fn forge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(args)
        .current_dir(dir)
        .env("SOURCE_DATE_EPOCH", EPOCH)
        .output()
        .expect("forge binary runs")
}

/// Runs and returns stdout, or an error naming the command and its stderr tail.
pub fn forge_ok(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = forge(dir, args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        let err = String::from_utf8_lossy(&out.stderr);
        let tail: Vec<&str> = err.lines().rev().take(3).collect();
        Err(format!("forge {} exited {:?}: {}", args.join(" "), out.status.code(), tail.join(" | ")))
    }
}

/// The fixture pipeline: every artifact-producing subcommand on the tiny world.
pub const PIPELINE: &[&[&str]] = &[
    &["synth", "--world", "tiny", "--out-dir", "data"],
    &["icp", "--sigma", "0.05"],
    &["dke", "--epochs", "2"],
    &["rcd", "--set", "backoff_ms=0", "--failure-rate", "0.1"],
    &["pretrain", "--epochs", "3"],
    &["sft", "--epochs", "4"],
    &["eval"],
    &["snapshot", "--pairs", "data/clicks.jsonl", "--top-pairs", "300"],
    &["ablate", "--world", "tiny", "--seeds", "2", "--out", "out/ablate.json"],
];

pub fn run_pipeline(dir: &Path) -> Result<(), String> {
    for args in PIPELINE {
        forge_ok(dir, args)?;
    }
    Ok(())
}

/// Every file below `dir`, keyed by relative path.
pub fn artifacts(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs the pipeline in two fresh directories and lists artifacts that differ.
pub fn reproducibility() -> Result<usize, String> {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path())?;
    run_pipeline(b.path())?;
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    let names_a: Vec<&PathBuf> = fa.keys().collect();
    let names_b: Vec<&PathBuf> = fb.keys().collect();
    if names_a != names_b {
        return Err(format!("artifact sets differ: {names_a:?} vs {names_b:?}"));
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|(k, v)| fb[*k] != **v)
        .map(|(k, _)| k.display().to_string())
        .collect();
    if differing.is_empty() {
        Ok(fa.len())
    } else {
        Err(format!("differing artifacts: {differing:?}"))
    }
}
