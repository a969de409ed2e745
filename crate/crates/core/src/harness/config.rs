//! Experiment configuration. One JSON document fully determines every
//! artifact byte-for-byte in single-threaded mode.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::classifier::ClassifierTrainOpts;
use crate::dataset::DatasetConfig;
use crate::denoiser::{DenoiserConfig, TrainOpts};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub denoiser: DenoiserConfig,
    pub denoiser_train: TrainOpts,
    pub classifier_train: ClassifierTrainOpts,
    pub attack: AttackConfig,
    /// Filtered eval clips to attack.
    pub eval_clip_count: usize,
    /// Dispatch per-clip attacks to a worker pool.
    pub parallel: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            denoiser: DenoiserConfig::default(),
            denoiser_train: TrainOpts::default(),
            classifier_train: ClassifierTrainOpts::default(),
            attack: AttackConfig::default(),
            eval_clip_count: 64,
            parallel: false,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, super::HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), super::HarnessError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_roundtrip() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"eval_clip_count": 8}"#).unwrap();
        assert_eq!(cfg.eval_clip_count, 8);
        assert_eq!(cfg.attack, crate::attack::AttackConfig::default());
    }
}
