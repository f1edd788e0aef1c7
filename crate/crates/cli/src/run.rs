//! Run directories named `<command>-<unix seconds>-<hash>`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};

use crate::RunArgs;

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Uses `--run-dir` when given, otherwise a fresh timestamped directory under `root`.
    pub fn create(args: &RunArgs, root: &Path, command: &str, hash: &str) -> Result<Self> {
        let path = match &args.run_dir {
            Some(d) => d.clone(),
            None => {
                let secs = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                let base = format!("{command}-{secs}-{hash}");
                let mut path = root.join(&base);
                let mut n = 1;
                while path.exists() {
                    n += 1;
                    path = root.join(format!("{base}-{n}"));
                }
                path
            }
        };
        fs::create_dir_all(&path).with_context(|| path.display().to_string())?;
        Ok(RunDir { path })
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.path.join(name);
        fs::write(&path, contents).with_context(|| path.display().to_string())
    }
}
