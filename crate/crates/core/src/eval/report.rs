use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{IoContext, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassCount {
    /// Original identity label, 0-based.
    pub identity: usize,
    pub count: usize,
    pub top1: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub n_c: usize,
    pub top1: f64,
    pub top5: f64,
    /// Number of classified images.
    pub evaluated: usize,
    pub per_class: Vec<ClassCount>,
    pub config_hash: String,
    pub seed: u64,
    /// Protocol-specific scalars.
    pub extra: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn extra(&self, key: &str) -> Option<f64> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "protocol\t{}", self.protocol);
        let _ = writeln!(s, "n_c\t{}", self.n_c);
        let _ = writeln!(s, "top1\t{}", self.top1);
        let _ = writeln!(s, "top5\t{}", self.top5);
        let _ = writeln!(s, "evaluated\t{}", self.evaluated);
        let _ = writeln!(s, "config_hash\t{}", self.config_hash);
        let _ = writeln!(s, "seed\t{}", self.seed);
        for (k, v) in &self.extra {
            let _ = writeln!(s, "{k}\t{v}");
        }
        let _ = writeln!(s, "class\tidentity\tcount\ttop1_correct");
        for (i, c) in self.per_class.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{}\t{}\t{}", c.identity + 1, c.count, c.top1);
        }
        s.push('\n');
        s.push_str(&self.summary());
        s
    }

    /// Human-readable block, every line prefixed with `#`.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# {} ({}-way, seed {}, config {})",
            self.protocol, self.n_c, self.seed, self.config_hash
        );
        let _ = writeln!(
            s,
            "# top-1 {:.2}%  top-5 {:.2}%  over {} images",
            100.0 * self.top1,
            100.0 * self.top5,
            self.evaluated
        );
        for (k, v) in &self.extra {
            let _ = writeln!(s, "# {k}: {v:.4}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).at(path)
    }
}
