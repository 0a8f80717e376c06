//! Flat JSON run configuration.
//!
//! Precedence, lowest first: built-in defaults, the config file, the `CAAE_SEED`
//! environment variable, command-line flags.

use std::path::{Path, PathBuf};

use caae_core::networks::NetworkConfig;
use caae_core::objectives::{GeneratorLoss, LossWeights};
use caae_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CAAE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run directory receiving config.json, log.csv and checkpoints/.
    pub out_dir: PathBuf,
    /// JSON-lines manifest of real images. Mutually exclusive with `synth_count`.
    pub manifest: Option<PathBuf>,
    /// Number of procedurally generated faces to train on.
    pub synth_count: Option<usize>,
    pub synth_seed: u64,

    pub lambda: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub ablate_dz: bool,
    pub ablate_dimg: bool,
    pub checkpoint_every: u64,
    pub generator_loss: GeneratorLoss,

    pub image_size: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub base_filters: usize,
    pub num_scales: usize,
    pub use_batchnorm_dimg: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_train(TrainConfig::default(), PathBuf::from("run"))
    }
}

impl RunConfig {
    pub fn from_train(t: TrainConfig, out_dir: PathBuf) -> Self {
        let n = t.network;
        Self {
            out_dir,
            manifest: None,
            synth_count: None,
            synth_seed: 0,
            lambda: t.weights.lambda,
            gamma: t.weights.gamma,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epochs: t.epochs,
            seed: t.seed,
            ablate_dz: t.ablate_dz,
            ablate_dimg: t.ablate_dimg,
            checkpoint_every: t.checkpoint_every,
            generator_loss: t.generator_loss,
            image_size: n.image_size,
            channels: n.channels,
            latent_dim: n.latent_dim,
            base_filters: n.base_filters,
            num_scales: n.num_scales,
            use_batchnorm_dimg: n.use_batchnorm_dimg,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: LossWeights { lambda: self.lambda, gamma: self.gamma },
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epochs: self.epochs,
            seed: self.seed,
            ablate_dz: self.ablate_dz,
            ablate_dimg: self.ablate_dimg,
            checkpoint_every: self.checkpoint_every,
            generator_loss: self.generator_loss,
            network: NetworkConfig {
                image_size: self.image_size,
                channels: self.channels,
                latent_dim: self.latent_dim,
                base_filters: self.base_filters,
                num_scales: self.num_scales,
                use_batchnorm_dimg: self.use_batchnorm_dimg,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    /// Apply `CAAE_SEED` if set, given its raw value.
    pub fn apply_seed_env(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v.trim().parse().map_err(|_| Error::invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Every problem with the configuration, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        match (&self.manifest, self.synth_count) {
            (Some(_), Some(_)) => errs.push("set exactly one of manifest and synth_count, not both".to_string()),
            (None, None) => errs.push("no dataset: set manifest or synth_count".to_string()),
            (None, Some(0)) => errs.push("synth_count must be positive".to_string()),
            _ => {}
        }
        if self.synth_count.is_some() && self.image_size % 16 != 0 {
            errs.push(format!("synthetic faces need image_size divisible by 16, got {}", self.image_size));
        }
        if self.out_dir.as_os_str().is_empty() {
            errs.push("out_dir must not be empty".to_string());
        }
        errs.extend(self.train_config().violations());
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_recipe() {
        let t = RunConfig::default().train_config();
        assert_eq!(t, TrainConfig::default());
        assert_eq!((t.weights.lambda, t.weights.gamma), (100.0, 10.0));
        assert_eq!((t.batch_size, t.learning_rate, t.beta1, t.epochs), (100, 0.0002, 0.5, 50));
    }

    #[test]
    fn partial_files_fill_in_defaults_and_reject_typos() {
        let c: RunConfig = serde_json::from_str(r#"{"synth_count": 10, "latent_dim": 8}"#).unwrap();
        assert_eq!((c.latent_dim, c.batch_size), (8, 100));
        assert!(serde_json::from_str::<RunConfig>(r#"{"latnet_dim": 8}"#).is_err());
    }

    #[test]
    fn lists_all_violations() {
        let c = RunConfig { learning_rate: 0.0, batch_size: 0, latent_dim: 1, ..RunConfig::default() };
        let errs = c.violations();
        assert!(errs.len() >= 4, "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("no dataset")));
        let both = RunConfig { manifest: Some("m".into()), synth_count: Some(3), ..RunConfig::default() };
        assert!(both.violations().iter().any(|e| e.contains("exactly one")));
    }

    #[test]
    fn seed_env_overrides() {
        let mut c = RunConfig::default();
        c.apply_seed_env(Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        c.apply_seed_env(None).unwrap();
        assert_eq!(c.seed, 42);
        assert!(c.apply_seed_env(Some("x")).is_err());
    }
}
