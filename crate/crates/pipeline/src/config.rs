//! Job configuration. Values come from defaults, then an optional TOML file,
//! then command-line overrides, each layer replacing the one before.

use std::path::{Path, PathBuf};

use baret_core::backbone::toy::{ToyBackboneConfig, TrainConfig};
use baret_core::bam::EditConfig;
use baret_core::diffusion::{SamplerConfig, ScheduleConfig};
use baret_core::ttis::{InversionConditioning, InversionMode, OptimizerConfig};
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    #[default]
    Toy,
    /// Pretrained latent-diffusion weights behind an adapter manifest.
    Adapter,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub toy: ToyBackboneConfig,
    pub train: TrainConfig,
    /// Explicit weights file; otherwise weights are looked up (or trained)
    /// in the cache directory.
    pub weights: Option<PathBuf>,
    /// Adapter manifest, for `kind = "adapter"`.
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobConfig {
    pub image: Option<PathBuf>,
    pub prompt: Option<String>,
    pub sampler: SamplerConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub mode: InversionMode,
    pub inversion_conditioning: InversionConditioning,
    pub edit: EditConfig,
    pub backbone: BackboneConfig,
    /// Seeds toy weight initialization and training.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl JobConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Defaults, or the file's contents when a path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// Backbone settings with the job seed applied.
    pub fn effective_backbone(&self) -> BackboneConfig {
        let mut b = self.backbone.clone();
        if let Some(seed) = self.seed {
            b.toy.seed = seed;
            b.train.seed = seed;
        }
        b
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(crate::weights::cache_dir)
    }

    /// Checks what inversion needs: an existing image and a non-empty prompt.
    pub fn validate_for_invert(&self) -> Result<()> {
        let image = self
            .image
            .as_ref()
            .ok_or_else(|| PipelineError::Config("an input image is required".into()))?;
        if !image.exists() {
            return Err(PipelineError::io(
                image,
                std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"),
            ));
        }
        if self.prompt.as_deref().is_none_or(|p| p.trim().is_empty()) {
            return Err(PipelineError::Config("the target prompt must not be empty".into()));
        }
        self.sampler.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_defaults() {
        let c = JobConfig::from_toml(
            "prompt = \"red square lying\"\nseed = 4\n[optimizer]\nlearning_rate = 0.01\n[edit]\nsa_fraction = 0.2\n",
        )
        .unwrap();
        assert_eq!(c.optimizer.learning_rate, 0.01);
        assert_eq!(c.optimizer.inner_iterations, 5);
        assert_eq!(c.edit.sa_fraction, 0.2);
        assert_eq!(c.edit.ca_fraction, 0.6);
        assert_eq!(c.sampler.guidance_scale, 7.5);
        assert_eq!(c.effective_backbone().toy.seed, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(JobConfig::from_toml("promt = \"x\"").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = JobConfig::default();
        assert_eq!(JobConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
