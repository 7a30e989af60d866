//! Run configuration loaded from TOML.

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::lpg::LpgConfig;
use crate::synthdata::DegradationKind;
use crate::wnenet::WnenetConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kinds: Vec<DegradationKind>,
    /// Pairs written by `gen-data`.
    pub samples: usize,
    /// Side of the restoration images.
    pub size: usize,
    /// Distinct training pairs for the restorer.
    pub train_pairs: usize,
    pub train_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { kinds: DegradationKind::ALL.to_vec(), samples: 100, size: 32, train_pairs: 4000, train_seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub heldout: usize,
    pub heldout_seed: u64,
    /// Held-out set size for the prompt generator accuracies.
    pub lpg_heldout: usize,
    pub sample_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { heldout: 32, heldout_seed: 7_777, lpg_heldout: 480, sample_seed: 11 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub lpg: LpgConfig,
    pub diffusion: DiffusionConfig,
    pub wnenet: WnenetConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = match (unknown_key(&msg), e.span()) {
                (Some(k), Some(span)) => match section_at(text, span.start) {
                    Some(sec) => format!("{sec}.{k}"),
                    None => k,
                },
                (Some(k), None) => k,
                (None, _) => "<document>".into(),
            };
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        self.lpg.validate()?;
        self.diffusion.validate()?;
        self.wnenet.validate()?;
        if self.data.kinds.is_empty() {
            return Err(Error::config("data.kinds", "needs at least one degradation kind"));
        }
        for (k, v) in [("data.samples", self.data.samples), ("data.train_pairs", self.data.train_pairs), ("eval.heldout", self.eval.heldout)] {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        let stride = self.wnenet.stride().max(self.lpg.stride());
        if self.data.size == 0 || self.data.size % stride != 0 {
            return Err(Error::config("data.size", format!("must be a positive multiple of {stride}")));
        }
        if self.wnenet.in_channels != 6 {
            return Err(Error::config("wnenet.in_channels", "the restorer takes the noisy and degraded images, 6 channels"));
        }
        if self.wnenet.d_p != self.lpg.d_p {
            return Err(Error::config("wnenet.d_p", format!("must equal lpg.d_p = {}", self.lpg.d_p)));
        }
        if self.wnenet.m != self.lpg.m {
            return Err(Error::config("wnenet.m", format!("must equal lpg.m = {}", self.lpg.m)));
        }
        Ok(())
    }
}

/// Name of the `[table]` header governing byte offset `pos`.
fn section_at(text: &str, pos: usize) -> Option<String> {
    text[..pos.min(text.len())]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('[') && l.ends_with(']'))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string())
}

fn unknown_key(msg: &str) -> Option<String> {
    let start = msg.find("unknown field `")? + "unknown field `".len();
    let end = msg[start..].find('`')?;
    Some(msg[start..start + end].to_string())
}
