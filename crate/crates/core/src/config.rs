//! Run configuration stored as JSON next to every run.
//!
//! Every field must be present; unknown fields are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::auxiliary::CombineConfig;
use crate::model::ModelDims;
use crate::train::{Phase, TrainConfig};
use crate::{Error, Result};

/// Layer widths without the vocabulary size, which comes from the vocabulary file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Widths {
    pub embed: usize,
    pub hidden: usize,
    pub att: usize,
    pub feature: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub length_norm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `features.fvec`, `captions.json` and `manifest.json`.
    pub data_dir: PathBuf,
    pub vocab: PathBuf,
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub widths: Widths,
    /// Cross-entropy phase; its `phase` must be `xe`.
    pub xe: TrainConfig,
    /// Joint reinforcement phase; its `phase` must be `rl`.
    pub rl: TrainConfig,
    pub combine: CombineConfig,
    pub decode: DecodeConfig,
    pub paths: Paths,
    /// Checkpoint every this many epochs, besides `best.ckpt` and `last.ckpt`.
    pub checkpoint_every: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.xe.validate()?;
        self.rl.validate()?;
        if self.xe.phase != Phase::Xe || self.rl.phase != Phase::Rl {
            return Err(Error::Config("xe and rl sections must carry their own phase".into()));
        }
        self.combine.validate()?;
        if self.decode.beam_width == 0 {
            return Err(Error::BeamWidth);
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        self.dims(crate::UNK + 1).validate()
    }

    pub fn phase(&self, phase: Phase) -> &TrainConfig {
        match phase {
            Phase::Xe => &self.xe,
            Phase::Rl => &self.rl,
        }
    }

    /// Overrides the seed of both phases.
    pub fn set_seed(&mut self, seed: u64) {
        self.xe.seed = seed;
        self.rl.seed = seed;
    }

    pub fn dims(&self, vocab: usize) -> ModelDims {
        let w = self.widths;
        ModelDims {
            vocab,
            embed: w.embed,
            hidden: w.hidden,
            att: w.att,
            feature: w.feature,
            max_len: w.max_len,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
