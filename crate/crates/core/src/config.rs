//! Run configuration read from TOML. Every key has a default and unknown keys
//! are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::CostModel;
use crate::policies::Policy;
use crate::pyramid::ModelConfig;
use crate::synth::{FamilyCounts, ShapeSizes};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    /// Instances per family in the training split.
    pub train: FamilyCounts,
    /// Instances per family in the evaluation split.
    pub eval: FamilyCounts,
    pub sizes: ShapeSizes,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: FamilyCounts::uniform(200),
            eval: FamilyCounts::uniform(50),
            sizes: ShapeSizes::default(),
        }
    }
}

impl DatasetConfig {
    /// Seed of the evaluation split; differs from the training seed so the
    /// two splits never share scenes.
    pub fn eval_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub policy: Policy,
    /// Write per-instance contour PNGs.
    pub overlays: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { policy: Policy::Dynamic, overlays: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub cost: CostModel,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cost.validate()?;
        self.trainer.validate()?;
        self.eval.policy.validate()?;
        self.dataset.sizes.validate()?;
        if self.dataset.train.total() == 0 {
            return Err(Error::Config("training split is empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the effective configuration, so
    /// formatting and key order in the file do not matter.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&json).into()
    }
}
