#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn ltx() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ltx"))
}

pub fn write_config(dir: &Path, name: &str, json: &serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(json).unwrap()).unwrap();
    p
}

/// Runs `ltx <cmd> --config <cfg> --out <out>` with optional extra env.
pub fn run(cmd: &str, cfg: &Path, out: &Path, extra: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = ltx();
    c.arg(cmd)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().unwrap()
}

/// Every file under `root` (excluding rerun subdirectories) keyed by relative path.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.file_name().is_some_and(|n| n == "reruns") {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// The first differing file between two snapshots, if any.
pub fn first_difference(
    a: &BTreeMap<String, Vec<u8>>,
    b: &BTreeMap<String, Vec<u8>>,
) -> Option<String> {
    if a.keys().ne(b.keys()) {
        let ka: Vec<_> = a.keys().collect();
        let kb: Vec<_> = b.keys().collect();
        return Some(format!("file sets differ: {ka:?} vs {kb:?}"));
    }
    a.iter().find(|(k, v)| b[*k] != **v).map(|(k, _)| k.clone())
}

pub fn minimal_config(run_id: &str) -> serde_json::Value {
    serde_json::json!({
        "run_id": run_id,
        "seed": 0,
        "dataset": {"samples_per_class": 16},
        "pruning": {"rounds": 2, "train_iters": 20},
        "concepts": {"examples_per_concept": 5}
    })
}
