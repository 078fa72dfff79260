//! Experiment configuration file (TOML). Every field has a default and unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, SynthConfig};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::eval::DifficultyBands;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bands: DifficultyBands,
    pub iou_thresh: f64,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub fps_runs: usize,
    pub input_sizes: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bands: DifficultyBands::default(),
            iou_thresh: 0.5,
            score_thresh: 0.05,
            nms_thresh: 0.4,
            fps_runs: 1000,
            input_sizes: vec![256, 512, 1024],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.bands.validate()?;
        for (name, v) in [
            ("iou_thresh", self.iou_thresh),
            ("score_thresh", self.score_thresh),
            ("nms_thresh", self.nms_thresh),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("eval.{name} = {v} not in [0, 1]")));
            }
        }
        if self.fps_runs == 0 {
            return Err(Error::Config("eval.fps_runs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: DetectorConfig,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.synth.image_size != self.model.pyramid.input_size {
            return Err(Error::Config(format!(
                "synth.image_size ({}) must equal model.pyramid.input_size ({})",
                self.synth.image_size, self.model.pyramid.input_size
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.augment.seed = seed;
        self.train.seed = seed;
        self
    }
}
