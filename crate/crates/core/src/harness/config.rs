use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::encoders::HeadMode;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::losses::{IrmConfig, IrmVariant};
use crate::mining::MiningConfig;

/// Environment variable that overrides the run seed.
pub const SEED_ENV: &str = "INVJOINT_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub output_dim: usize,
    pub hidden_layers: usize,
    pub init_std: f64,
    /// Fixed multiplier on the 2D cosine logits.
    pub head_scale_2d: f64,
    pub head_mode_3d: HeadMode,
    /// Replaces the plain view mean by the multi-view adapter with this blend.
    pub adapter_delta: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            output_dim: 16,
            hidden_layers: 2,
            init_std: 0.1,
            head_scale_2d: 10.0,
            head_mode_3d: HeadMode::Affine,
            adapter_delta: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
    /// Similarity multiplier of the alignment loss.
    pub tau: f64,
    pub variant: IrmVariant,
    pub lambda_min: f64,
    pub beta: f64,
    pub include_25d: bool,
    /// Augmented copies of each hard 3D sample added to its environment.
    pub augment_copies: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        let irm = IrmConfig::default();
        Self {
            lambda: irm.lambda,
            alpha: 1.0,
            tau: 10.0,
            variant: irm.variant,
            lambda_min: irm.lambda_min,
            beta: irm.beta,
            include_25d: irm.include_25d,
            augment_copies: 1,
        }
    }
}

impl LossConfig {
    pub fn irm(&self) -> IrmConfig {
        IrmConfig {
            lambda: self.lambda,
            variant: self.variant,
            lambda_min: self.lambda_min,
            beta: self.beta,
            include_25d: self.include_25d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning-rate multiplier for the gate group.
    pub gate_lr_scale: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            weight_decay: 1e-4,
            momentum: 0.9,
            epochs: 50,
            batch_size: 32,
            gate_lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub enable_step1: bool,
    pub enable_step2: bool,
    pub enable_align: bool,
    /// Lets the invariance loss run on every sample when mining is off.
    pub invariance_on_all: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            enable_step1: true,
            enable_step2: true,
            enable_align: true,
            invariance_on_all: false,
        }
    }
}

impl AblationFlags {
    /// Plain late fusion of two independently trained branches.
    pub fn baseline() -> Self {
        Self {
            enable_step1: false,
            enable_step2: false,
            enable_align: false,
            invariance_on_all: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub mining: MiningConfig,
    pub optim: OptimConfig,
    pub ablation: AblationFlags,
    pub fusion: FusionConfig,
}

/// Where the effective seed came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Config,
    Environment,
    CommandLine,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Same run with `seed` driving both the data and the model.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.generator.seed = seed;
        cfg
    }

    /// Applies the seed environment variable, if set.
    pub fn apply_seed_env(&mut self) -> Result<SeedSource> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer")))?;
                Ok(SeedSource::Environment)
            }
            Err(_) => Ok(SeedSource::Config),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.mining.validate()?;
        self.fusion.validate()?;
        let o = &self.optim;
        if o.epochs == 0 || o.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(o.base_lr > 0.0)
            || !(o.gate_lr_scale > 0.0)
            || !(o.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&o.momentum)
        {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        let l = &self.loss;
        if !(l.lambda >= 0.0 && l.alpha >= 0.0 && l.beta >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if l.variant == IrmVariant::MmRex {
            let envs = if l.include_25d { 3.0 } else { 2.0 };
            if l.lambda_min > 1.0 / envs {
                return Err(Error::Config(format!("lambda_min exceeds 1/{envs}")));
            }
        }
        let m = &self.model;
        if m.output_dim == 0 || !(m.head_scale_2d > 0.0) {
            return Err(Error::Config("invalid model settings".into()));
        }
        if let Some(d) = m.adapter_delta {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Config(format!("adapter_delta {d} outside [0, 1]")));
            }
        }
        let a = &self.ablation;
        if a.enable_step2 && !a.enable_step1 && !a.invariance_on_all {
            return Err(Error::Config(
                "enable_step2 needs enable_step1 or invariance_on_all".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let partial = RunConfig::from_toml("seed = 4\n[loss]\nlambda = 1.0\n").unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.loss.lambda, 1.0);
        assert_eq!(partial.optim, OptimConfig::default());
        assert!(RunConfig::from_toml("unknown = 1").is_err());
    }

    #[test]
    fn step2_without_step1_needs_override() {
        let mut cfg = RunConfig::default();
        cfg.ablation.enable_step1 = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.ablation.invariance_on_all = true;
        cfg.validate().unwrap();
    }

    #[test]
    fn with_seed_sets_both_seeds() {
        let cfg = RunConfig::default().with_seed(9);
        assert_eq!((cfg.seed, cfg.generator.seed), (9, 9));
    }
}
