//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and out-of-range
//! values are rejected with the offending line number.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::networks::LinkSpec;
use crate::training::TrainConfig;

/// Every recognised key, in serialization order.
pub const KEYS: &[&str] = &[
    "image_size",
    "base_channels",
    "id_dim",
    "noise_dim",
    "num_ids",
    "num_attrs",
    "ablation",
    "links",
    "lambda",
    "lr",
    "beta1",
    "beta2",
    "batch_size",
    "steps",
    "seed",
    "checkpoint_every",
    "deterministic",
    "data",
    "run_root",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Dataset manifest.
    pub data: Option<PathBuf>,
    /// Directory under which run directories are created.
    pub run_root: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: None,
            run_root: PathBuf::from("runs"),
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: '{value}' is not a valid number")))
}

fn in_range<V: PartialOrd + std::fmt::Display>(key: &str, v: V, lo: V, hi: V) -> Result<V> {
    if v < lo || v > hi {
        return Err(Error::Config(format!("{key}: {v} outside [{lo}, {hi}]")));
    }
    Ok(v)
}

fn parse_links(value: &str) -> Result<Vec<LinkSpec>> {
    if value == "none" || value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| s.trim().parse()).collect()
}

fn format_links(links: &[LinkSpec]) -> String {
    if links.is_empty() {
        return "none".into();
    }
    links
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Sets one key, range-checking its value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let n = &mut t.net;
        match key {
            "image_size" => {
                let v = in_range(key, parse_num(key, value)?, 16, 1024)?;
                if v % 16 != 0 {
                    return Err(Error::Config(format!("{key}: {v} is not a multiple of 16")));
                }
                n.image_size = v;
            }
            "base_channels" => n.base_channels = in_range(key, parse_num(key, value)?, 1, 1024)?,
            "id_dim" => n.id_dim = in_range(key, parse_num(key, value)?, 1, 4096)?,
            "noise_dim" => n.noise_dim = in_range(key, parse_num(key, value)?, 1, 4096)?,
            "num_ids" => n.num_ids = in_range(key, parse_num(key, value)?, 1, 1_000_000)?,
            "num_attrs" => n.num_attrs = in_range(key, parse_num(key, value)?, 1, 64)?,
            "ablation" => n.ablation = value.parse()?,
            "links" => {
                let links = parse_links(value)?;
                if links.iter().any(|l| l.radius > 1024) {
                    return Err(Error::Config(format!("{key}: radius above 1024")));
                }
                n.links = links;
            }
            "lambda" => {
                let v: f64 = parse_num(key, value)?;
                t.lambda = in_range(key, v, 0.0, 1e6)?;
            }
            "lr" => {
                let v: f64 = parse_num(key, value)?;
                if v <= 0.0 || v > 1.0 {
                    return Err(Error::Config(format!("{key}: {v} outside (0, 1]")));
                }
                t.lr = v;
            }
            "beta1" | "beta2" => {
                let v: f64 = parse_num(key, value)?;
                if !(0.0..1.0).contains(&v) {
                    return Err(Error::Config(format!("{key}: {v} outside [0, 1)")));
                }
                if key == "beta1" {
                    t.beta1 = v;
                } else {
                    t.beta2 = v;
                }
            }
            "batch_size" => t.batch_size = in_range(key, parse_num(key, value)?, 2, 4096)?,
            "steps" => t.steps = parse_num(key, value)?,
            "seed" => t.seed = parse_num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(key, value)?,
            "deterministic" => {
                t.deterministic = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(Error::Config(format!("{key}: '{value}' is not a boolean"))),
                }
            }
            "data" => self.data = Some(PathBuf::from(value)),
            "run_root" => self.run_root = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `text` on top of the defaults; later lines override earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| Error::Config(format!("line {}: {}", i + 1, strip(e)));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(Error::Config(format!("expected key = value, got '{line}'"))))?;
            cfg.set(key.trim(), value.trim()).map_err(at)?;
        }
        cfg.train
            .net
            .validate()
            .map_err(|e| Error::Config(strip(e)))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let n = &t.net;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("image_size", n.image_size.to_string());
        put("base_channels", n.base_channels.to_string());
        put("id_dim", n.id_dim.to_string());
        put("noise_dim", n.noise_dim.to_string());
        put("num_ids", n.num_ids.to_string());
        put("num_attrs", n.num_attrs.to_string());
        put("ablation", n.ablation.to_string());
        put("links", format_links(&n.links));
        put("lambda", t.lambda.to_string());
        put("lr", t.lr.to_string());
        put("beta1", t.beta1.to_string());
        put("beta2", t.beta2.to_string());
        put("batch_size", t.batch_size.to_string());
        put("steps", t.steps.to_string());
        put("seed", t.seed.to_string());
        put("checkpoint_every", t.checkpoint_every.to_string());
        put("deterministic", t.deterministic.to_string());
        if let Some(d) = &self.data {
            put("data", d.display().to_string());
        }
        put("run_root", self.run_root.display().to_string());
        s
    }

    /// First 8 hex digits of the SHA-256 of the training configuration.
    pub fn hash8(&self) -> String {
        config_hash(&self.train.to_text())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// First 8 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(4).map(|b| format!("{b:02x}")).collect()
}

impl TrainConfig {
    /// Training keys only; paths are excluded so checkpoints are relocatable.
    pub fn to_text(&self) -> String {
        let run = RunConfig {
            train: self.clone(),
            data: None,
            run_root: PathBuf::new(),
        };
        run.to_text()
            .lines()
            .filter(|l| !l.starts_with("run_root"))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(RunConfig::parse(text)?.train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::Ablation;
    use proptest::prelude::*;

    #[test]
    fn parses_with_comments() {
        let cfg = RunConfig::parse(
            "# smoke\nbase_channels = 16\n\nablation = vanilla # no links\nlinks = 8:2, 16:4\nlambda=1\n",
        )
        .unwrap();
        assert_eq!(cfg.train.net.base_channels, 16);
        assert_eq!(cfg.train.net.ablation, Ablation::Vanilla);
        assert_eq!(cfg.train.net.links.len(), 2);
        assert_eq!(cfg.train.lambda, 1.0);
    }

    #[test]
    fn errors_name_the_line() {
        for (text, needle) in [
            ("steps = 10\nbogus = 1\n", "line 2"),
            ("batch_size = 1\n", "line 1"),
            ("\n\nlr = -3\n", "line 3"),
            ("image_size = 40\n", "line 1"),
            ("seed 4\n", "line 1"),
            ("links = 16\n", "line 1"),
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
            assert!(err.to_string().contains(needle), "{text:?}: {err}");
        }
        assert!(RunConfig::parse("links = 64:2\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("lr", "0.00015").unwrap();
        cfg.set("links", "none").unwrap();
        cfg.set("data", "d/manifest.csv").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let t = TrainConfig::from_text(&cfg.train.to_text()).unwrap();
        assert_eq!(t, cfg.train);
        assert_eq!(cfg.hash8().len(), 8);
        assert_ne!(cfg.hash8(), RunConfig::default().hash8());
    }

    proptest! {
        #[test]
        fn numeric_values_round_trip(
            lr in 1e-6f64..1.0,
            lambda in 0.0f64..100.0,
            batch in 2usize..512,
            seed in any::<u64>(),
        ) {
            let mut cfg = RunConfig::default();
            cfg.train.lr = lr;
            cfg.train.lambda = lambda;
            cfg.train.batch_size = batch;
            cfg.train.seed = seed;
            prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }
}
