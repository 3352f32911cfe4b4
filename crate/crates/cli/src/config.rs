//! Run configuration: one JSON document composed of every module's config.
//!
//! Precedence is flags, then the `--config` file, then the preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use neurodecode::augment::AugmentConfig;
use neurodecode::dataio::SynthSpec;
use neurodecode::model::ModelConfig;
use neurodecode::training::OptimConfig;

use crate::error::Failure;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub optim: OptimConfig,
    pub synth: SynthSpec,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            optim: OptimConfig::default(),
            synth: SynthSpec::default(),
            dataset: None,
            out: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Default)]
pub enum Preset {
    /// Full-size model defaults.
    #[default]
    Paper,
    /// Small model matched to the default synthetic dataset.
    Desk,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => RunConfig::default(),
            Preset::Desk => RunConfig {
                model: ModelConfig {
                    channels: 32,
                    num_sessions: 3,
                    d_model: 64,
                    num_blocks: 2,
                    heads: 4,
                    d_ff: 256,
                    conv_kernel: 15,
                    ..ModelConfig::default()
                },
                optim: OptimConfig {
                    warmup_steps: 100,
                    epochs: 30,
                    batch_size: 16,
                    ..OptimConfig::default()
                },
                ..RunConfig::default()
            },
        }
    }

    /// Preset values overlaid with the fields present in `file`.
    pub fn resolve(preset: Preset, file: Option<&Path>) -> Result<Self, Failure> {
        let base = RunConfig::preset(preset);
        let Some(path) = file else {
            return Ok(base);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Io(format!("cannot read config {}: {e}", path.display())))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        let mut merged = serde_json::to_value(&base).expect("plain data");
        merge(&mut merged, overlay);
        serde_json::from_value(merged).map_err(|e| Failure::Config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate().map_err(|e| Failure::Config(e.to_string()))?;
        self.augment.validate().map_err(|e| Failure::Config(e.to_string()))?;
        self.optim.validate().map_err(|e| Failure::Config(e.to_string()))?;
        self.synth.validate().map_err(|e| Failure::Config(e.to_string()))?;
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, Failure> {
        let path = dir.join(RUN_CONFIG_FILE);
        let text = serde_json::to_string_pretty(self).expect("plain data");
        std::fs::write(&path, text + "\n").map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Objects merge key by key; anything else in `overlay` replaces `base`.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_merges() {
        let c = RunConfig::preset(Preset::Desk);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);

        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"optim": {"epochs": 3}, "model": {"d_model": 32}}"#).unwrap();
        let r = RunConfig::resolve(Preset::Desk, Some(&f)).unwrap();
        assert_eq!(r.optim.epochs, 3);
        assert_eq!(r.optim.batch_size, 16);
        assert_eq!(r.model.d_model, 32);
        assert_eq!(r.model.channels, 32);

        std::fs::write(&f, r#"{"optim": {"epoch": 3}}"#).unwrap();
        assert!(matches!(RunConfig::resolve(Preset::Desk, Some(&f)), Err(Failure::Config(_))));
    }

    #[test]
    fn defaults_are_the_full_model() {
        let c = RunConfig::default();
        assert_eq!((c.model.d_model, c.model.num_blocks, c.model.num_sessions), (512, 6, 45));
        assert_eq!(c.optim.day_lr, 5e-3);
    }
}
