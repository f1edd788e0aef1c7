//! Helpers shared by the CLI and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

/// Smallest configuration that trains on 16×16 images.
pub const TINY: &str = "image_size = 16
base_channels = 2
id_dim = 4
noise_dim = 3
links = 8:1
batch_size = 4
steps = 6
checkpoint_every = 3
";

pub fn idmorph(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idmorph"))
        .args(args)
        .current_dir(dir)
        .env("IDMORPH_LOG", "warn")
        .output()
        .expect("spawn idmorph")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = idmorph(dir, args);
    assert_eq!(
        code(&out),
        0,
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// SHA-256 of every file below `root`, keyed by relative path.
pub fn digests(root: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                let hex = Sha256::digest(fs::read(&path).unwrap())
                    .iter()
                    .map(|b| format!("{b:02x}"))
                    .collect();
                out.insert(rel, hex);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Run directories under `root` whose names start with `command-`, sorted.
pub fn runs(root: &Path, command: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.file_name()
                .unwrap()
                .to_str()
                .unwrap()
                .starts_with(&format!("{command}-"))
        })
        .collect();
    v.sort();
    v
}

/// Runs `args` twice under one run root and checks both run directories match byte for byte.
pub fn reproducible(dir: &Path, command: &str, args: &[&str]) -> PathBuf {
    let mut full = vec![command];
    full.extend_from_slice(args);
    full.extend_from_slice(&["--run-root", "runs"]);
    ok(dir, &full);
    ok(dir, &full);
    let found = runs(&dir.join("runs"), command);
    let [a, b] = &found[found.len() - 2..] else {
        unreachable!()
    };
    let (da, db) = (digests(a), digests(b));
    assert!(!da.is_empty());
    assert_eq!(da, db, "{command} outputs differ");
    a.clone()
}
