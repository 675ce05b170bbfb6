//! `key = value` run configuration.
//!
//! ```text
//! # comment
//! seed = 7
//! synth.width = 160
//! net.epochs = 12
//! ```
//!
//! Unknown keys are rejected. Command-line flags are applied afterwards and
//! win over the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dentseg::net::NetConfig;
use dentseg::synth::SynthConfig;

pub const KEYS: &[&str] = &[
    "seed",
    "count",
    "threads",
    "reps",
    "noise_bank",
    "checkpoint",
    "out",
    "threshold",
    "val_fraction",
    "synth.width",
    "synth.height",
    "synth.world_x",
    "synth.world_y",
    "synth.dent_prob",
    "synth.dent_decay",
    "synth.sigma",
    "synth.xy_jitter",
    "synth.rotation_x",
    "synth.rotation_y",
    "synth.rotation_z",
    "synth.dent_size_min",
    "synth.dent_size_max",
    "synth.dent_depth_min",
    "synth.dent_depth_max",
    "synth.curvature_min",
    "synth.curvature_max",
    "net.levels",
    "net.stem",
    "net.skip_fraction",
    "net.learning_rate",
    "net.batch_size",
    "net.epochs",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub count: u64,
    pub threads: Option<usize>,
    pub reps: usize,
    pub noise_bank: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threshold: Option<f32>,
    pub val_fraction: f64,
    pub synth: SynthConfig,
    pub net: NetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 1000,
            threads: None,
            reps: 5,
            noise_bank: None,
            checkpoint: None,
            out: None,
            threshold: None,
            val_fraction: 0.2,
            synth: SynthConfig::default(),
            net: NetConfig::default(),
        }
    }
}

/// A problem with the configuration itself (reported as a usage error).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T, ConfigError> {
    raw.parse()
        .map_err(|_| ConfigError(format!("config key `{key}`: cannot parse {raw:?}")))
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError(format!("line {}: expected `key = value`", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(ConfigError(format!("line {}: unknown key `{k}`", i + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(ConfigError(format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(map)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply(&parse_pairs(&text)?)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<(), ConfigError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let s = &mut self.synth;
        let n = &mut self.net;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "count" => self.count = parse(key, v)?,
            "threads" => self.threads = Some(parse(key, v)?),
            "reps" => self.reps = parse(key, v)?,
            "noise_bank" => self.noise_bank = Some(v.into()),
            "checkpoint" => self.checkpoint = Some(v.into()),
            "out" => self.out = Some(v.into()),
            "threshold" => self.threshold = Some(parse(key, v)?),
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "synth.width" => s.width = parse(key, v)?,
            "synth.height" => s.height = parse(key, v)?,
            "synth.world_x" => s.world_x = parse(key, v)?,
            "synth.world_y" => s.world_y = parse(key, v)?,
            "synth.dent_prob" => s.dent_prob = parse(key, v)?,
            "synth.dent_decay" => s.dent_decay = parse(key, v)?,
            "synth.sigma" => s.sigma = parse(key, v)?,
            "synth.xy_jitter" => s.xy_jitter = parse(key, v)?,
            "synth.rotation_x" => s.rotation_limits[0] = parse(key, v)?,
            "synth.rotation_y" => s.rotation_limits[1] = parse(key, v)?,
            "synth.rotation_z" => s.rotation_limits[2] = parse(key, v)?,
            "synth.dent_size_min" => s.dent_size.0 = parse(key, v)?,
            "synth.dent_size_max" => s.dent_size.1 = parse(key, v)?,
            "synth.dent_depth_min" => s.dent_depth.0 = parse(key, v)?,
            "synth.dent_depth_max" => s.dent_depth.1 = parse(key, v)?,
            "synth.curvature_min" => s.curvature.0 = parse(key, v)?,
            "synth.curvature_max" => s.curvature.1 = parse(key, v)?,
            "net.levels" => n.levels = parse(key, v)?,
            "net.stem" => n.stem = parse(key, v)?,
            "net.skip_fraction" => n.skip_fraction = parse(key, v)?,
            "net.learning_rate" => n.learning_rate = parse(key, v)?,
            "net.batch_size" => n.batch_size = parse(key, v)?,
            "net.epochs" => n.epochs = parse(key, v)?,
            _ => return Err(ConfigError(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Check cross-field constraints once flags have been applied.
    pub fn validate(&mut self) -> Result<(), ConfigError> {
        self.synth.seed = self.seed;
        self.net.seed = self.seed;
        if let Some(t) = self.threshold {
            self.net.threshold = t;
        }
        self.synth.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.net.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.count == 0 {
            return Err(ConfigError("count must be at least 1".into()));
        }
        if self.reps < 3 {
            return Err(ConfigError("reps must be at least 3".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(ConfigError("val_fraction must be in (0, 1)".into()));
        }
        if self.threads == Some(0) {
            return Err(ConfigError("threads must be at least 1".into()));
        }
        Ok(())
    }
}
