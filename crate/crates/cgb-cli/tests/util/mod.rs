//! Helpers shared by the binary's integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cgb")
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn cgb")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "cgb {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Relative path -> bytes for every regular file under `root`.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn csv_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    tree(root).into_iter().filter(|(k, _)| k.ends_with(".csv")).collect()
}

/// Drop the final (wall-clock) column of every row.
pub fn mask_wall(bytes: &[u8]) -> Vec<u8> {
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let mut masked = String::new();
    for line in text.lines() {
        let cut = line.rfind(',').expect("log rows are comma separated");
        masked.push_str(&line[..cut]);
        masked.push('\n');
    }
    masked.into_bytes()
}

/// Parse a manifest's command line back into argv tokens.
pub fn manifest_argv(dir: &Path) -> Vec<String> {
    let text = fs::read_to_string(dir.join("run_manifest.txt")).unwrap();
    let line = text
        .lines()
        .find_map(|l| l.strip_prefix("command = "))
        .expect("manifest has a command line");
    line.split_whitespace().map(String::from).collect()
}

/// Redirect (or set) the artifact directory of a parsed command line.
pub fn with_out(mut argv: Vec<String>, out: &Path) -> Vec<String> {
    let dest = out.display().to_string();
    if let Some(i) = argv.iter().position(|t| t == "--out") {
        argv[i + 1] = dest;
    } else {
        argv.push("--out".into());
        argv.push(dest);
    }
    argv
}

/// Re-execute `orig`'s manifest into `fresh` and compare every CSV from the
/// snapshot byte for byte, the training log's wall-clock column excepted.
/// Returns the number of files compared.
pub fn reexec_matches(
    orig: &Path,
    fresh: &Path,
    snapshot: &BTreeMap<String, Vec<u8>>,
) -> Result<usize, String> {
    let argv = with_out(manifest_argv(orig), fresh);
    let args: Vec<&str> = argv.iter().map(String::as_str).collect();
    let out = run(&args);
    if !out.status.success() {
        return Err(format!(
            "re-execution of {} failed:\n{}",
            orig.display(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    let replay = csv_tree(fresh);
    let mut compared = 0;
    for (rel, bytes) in snapshot {
        let Some(again) = replay.get(rel) else {
            return Err(format!("{rel} missing after re-execution of {}", orig.display()));
        };
        let same = if rel.ends_with("train_log.csv") {
            mask_wall(bytes) == mask_wall(again)
        } else {
            bytes == again
        };
        if !same {
            return Err(format!("{rel} differs after re-execution of {}", orig.display()));
        }
        compared += 1;
    }
    Ok(compared)
}
