//! Run configuration: a JSON file merged with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cammac::trainer::TrainConfig;
use cammac::{Flags, GenConfig};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "CAMMAC_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub outdir: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Falls back to `CAMMAC_SEED`, then 0.
    pub seed: Option<u64>,
    pub workers: usize,
    pub dialogs: usize,
    pub gen: GenConfig,
    pub model: String,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            workers: 1,
            dialogs: 100,
            gen: GenConfig::default(),
            model: "vanilla".into(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Invalid flags or configuration, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| usage(format!("bad config {}: {e}", p.display())))
            }
        }
    }

    /// Fills the seed and syncs derived fields so nothing is left unresolved.
    pub fn resolve(mut self) -> Result<Self> {
        let seed = match self.seed {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        self.train.seed = seed;
        self.train.flags = parse_model(&self.model)?;
        if self.workers == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved config")
    }

    /// Writes this config as pretty JSON to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

pub fn parse_model(name: &str) -> Result<Flags> {
    Flags::from_name(name).ok_or_else(|| {
        usage(format!(
            "unknown model {name:?}; valid models: {}",
            Flags::MODEL_NAMES.join(", ")
        ))
    })
}

/// Parses `HxW`.
pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || {
        usage(format!(
            "invalid grid {s:?}; expected HxW with positive integers, e.g. 4x4"
        ))
    };
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// `<path>.run.json` beside an output file.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}
