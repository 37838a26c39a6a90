//! Experiment configuration as one TOML document.
//!
//! Every table is optional and every key inside a table defaults, so a file
//! only lists what it changes:
//!
//! ```toml
//! [train]
//! variant = "no_M"
//! steps = 500
//!
//! [track]
//! update_interval = 10
//! ```
//!
//! Unknown keys are rejected with their name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SuiteConfig, SyntheticSceneConfig};
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::tracking::TrackerConfig;
use crate::training::{TrainConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub track: TrackerConfig,
    /// Scenes the training pairs are cut from.
    pub scene: SyntheticSceneConfig,
    /// The evaluation suite.
    pub suite: SuiteConfig,
    pub experiment: ExperimentConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            net: NetConfig::desk(),
            train: TrainConfig::default(),
            track: TrackerConfig::default(),
            scene: training_scene(),
            suite: SuiteConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

/// Short, small scenes with one look-alike and mild drift.
pub fn training_scene() -> SyntheticSceneConfig {
    SyntheticSceneConfig {
        name: "train".into(),
        frame_width: 200,
        frame_height: 200,
        num_frames: 30,
        distractors: 1,
        drift_rate: 0.01,
        ..Default::default()
    }
}

/// Multi-seed comparison settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Variants compared by a full ablation.
    pub variants: Vec<Variant>,
    pub workers: usize,
    /// Videos of held-out pairs, disjoint from training by seed.
    pub held_out_videos: usize,
    pub held_out_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
            workers: 1,
            held_out_videos: 25,
            held_out_seed: 0x0dd_5eed,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.geometry()?;
        self.train.validate()?;
        self.track.validate()?;
        self.scene.validate()?;
        self.suite.base.validate()?;
        if self.experiment.workers == 0 {
            return Err(Error::Config("experiment.workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn tables_override_only_their_keys() {
        let cfg = Config::from_toml_str("[train]\nvariant = \"no_M\"\nsteps = 7\n[net]\nu2_depth = 2\n").unwrap();
        assert_eq!(cfg.train.variant, Variant::NoM);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
        assert_eq!(cfg.net.u2_depth, 2);
        assert_eq!(cfg.net.channels, NetConfig::desk().channels);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = Config::from_toml_str("[track]\nupdate_intervall = 3\n").unwrap_err().to_string();
        assert!(err.contains("update_intervall"), "{err}");
        let err = Config::from_toml_str("[tracker]\n").unwrap_err().to_string();
        assert!(err.contains("tracker"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected_after_parsing() {
        let err = Config::from_toml_str("[train]\nvariant = \"ours\"\nbatch_size = 1\n").unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
    }

    #[test]
    fn serialized_config_parses_back() {
        let mut cfg = Config::default();
        cfg.track.update_interval = 9;
        cfg.scene.occlusions = vec![crate::data::Occlusion { start: 3, len: 2 }];
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
    }
}
