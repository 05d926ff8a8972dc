use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{SplitSizes, WorldConfig};
use crate::error::{Error, Result};
use crate::models::{GateMode, ModelKind, ModelSpec, Probe, Readout, HIDDEN_WIDTH};
use crate::training::TrainConfig;

/// Everything a command can be configured with. Built from defaults, then a
/// JSON file, then command-line flags, each layer overriding the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub sizes: SplitSizes,
    /// Seed of the dataset splits (the world has its own).
    pub data_seed: u64,
    pub train: TrainConfig,
    pub multimodal_dim: usize,
    pub hidden: usize,
    pub probe: Probe,
    pub readout: Readout,
    pub gate_mode: GateMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            sizes: SplitSizes::default(),
            data_seed: 1,
            train: TrainConfig::default(),
            multimodal_dim: 64,
            hidden: HIDDEN_WIDTH,
            probe: Probe::default(),
            readout: Readout::default(),
            gate_mode: GateMode::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path`, if given. Missing keys keep their defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Model spec for `kind` with dimensions taken from the data.
    pub fn model_spec(&self, kind: ModelKind, image_dim: usize, attribute_dim: usize, noun_dim: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(kind, image_dim, attribute_dim, noun_dim, self.multimodal_dim);
        spec.hidden = self.hidden;
        spec.probe = self.probe;
        spec.readout = self.readout;
        spec.gate_mode = self.gate_mode;
        spec
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults_key_by_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"max_epochs": 7}, "multimodal_dim": 16}"#).unwrap();
        let c = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(c.train.max_epochs, 7);
        assert_eq!(c.train.learning_rate, 0.09);
        assert_eq!(c.multimodal_dim, 16);
        assert_eq!(c.sizes, SplitSizes::default());
        assert_eq!(RunConfig::load(None).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"learning_rate": 0.1}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&path)), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(c, back);
    }
}
