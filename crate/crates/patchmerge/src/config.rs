//! Run configuration, read from and written to TOML.

use std::path::Path;

use patchmerge_core::inference::InferenceConfig;
use patchmerge_core::model::ModelConfig;
use patchmerge_core::supervision::LossConfig;
use patchmerge_core::synth::CorpusConfig;
use patchmerge_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Everything a command needs besides file paths. Missing sections and
/// fields take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of corpus generation.
    pub corpus_seed: u64,
    /// Seed of parameter initialization.
    pub model_seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        let i = &self.inference;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(i.affinity_threshold) || !unit(i.score_threshold) || !unit(i.min_visible) || !unit(i.kappa) || !(i.clip_temperature > 0.0) {
            return Err(Error::Usage("inference thresholds must lie in [0, 1] and the temperature be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}
