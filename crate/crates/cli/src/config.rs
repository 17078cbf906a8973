//! Run configuration: one TOML file covering the front end, the model, and
//! the optimizer, overridable from the command line. Everything is checked
//! before any work starts so a bad field fails fast instead of ten minutes
//! into preprocessing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vaclust_core::{DspConfig, ModelConfig, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Every random choice in a run (splits, weights, batch
    /// order, noise, embeddings) is derived from this one value.
    pub seed: u64,
    /// All artifacts are written under this directory, nowhere else.
    pub out_dir: PathBuf,
    pub dsp: DspConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/uvac"),
            dsp: DspConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Load from an optional TOML file and apply command-line overrides.
    pub fn load(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("cannot read config file {}", p.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("cannot parse config file {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out_dir = o.to_path_buf();
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    /// Propagate the master seed and validate every section.
    pub fn finalize(&mut self) -> Result<()> {
        self.train.seed = self.seed;
        self.train.validate().context("invalid [train] section")?;
        self.model.validate().context("invalid [model] section")?;
        if self.model.freq_bins != self.dsp.freq_bins || self.model.frames != self.dsp.frames {
            anyhow::bail!(
                "model input {}x{} does not match the front-end grid {}x{}",
                self.model.freq_bins,
                self.model.frames,
                self.dsp.freq_bins,
                self.dsp.frames
            );
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join("manifest.json")
    }

    pub fn cache_path(&self) -> PathBuf {
        self.out_dir.join("cache.bin")
    }

    pub fn default_checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("best.ckpt")
    }
}
