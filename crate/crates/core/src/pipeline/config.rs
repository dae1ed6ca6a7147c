use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::MelConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::{DiscriminatorConfig, LossWeights, Reduction};
use crate::nn::AdamConfig;
use crate::render::RenderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PerceptualKind {
    #[default]
    RandomPyramid,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub fps: u32,
    /// Audio may fall short of the video by at most this much at inference.
    pub max_audio_shortfall_secs: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { fps: 25, max_audio_shortfall_secs: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    /// Weight of the continuity term.
    pub lambda_continuity: f64,
    pub optimizer: AdamConfig,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            lambda_continuity: 1.0,
            optimizer: AdamConfig { lr: 1e-4, ..Default::default() },
            checkpoint_every: 1000,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub steps: usize,
    pub batch_size: usize,
    /// References per training sample.
    pub train_refs: usize,
    pub weights: LossWeights,
    pub style_reduction: Reduction,
    pub perceptual: PerceptualKind,
    pub discriminator: DiscriminatorConfig,
    pub optimizer: AdamConfig,
    pub disc_optimizer: AdamConfig,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 10000,
            batch_size: 4,
            train_refs: 3,
            weights: LossWeights::default(),
            style_reduction: Reduction::Mean,
            perceptual: PerceptualKind::RandomPyramid,
            discriminator: DiscriminatorConfig::default(),
            optimizer: AdamConfig { lr: 2e-4, beta1: 0.5, ..Default::default() },
            disc_optimizer: AdamConfig { lr: 2e-4, beta1: 0.5, ..Default::default() },
            checkpoint_every: 1000,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    /// Reference images used by the renderer, as a fraction of the clip length.
    pub ref_fraction: f64,
    /// Paste-back blur as a fraction of the face height.
    pub mask_sigma_fraction: f64,
    /// Frames rendered per forward pass.
    pub batch_size: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { ref_fraction: 0.2, mask_sigma_fraction: 0.02, batch_size: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub mel: MelConfig,
    pub generator: GeneratorConfig,
    pub render: RenderConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            mel: MelConfig::default(),
            generator: GeneratorConfig::default(),
            render: RenderConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            infer: InferConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.generator.validate()?;
        self.render.validate()?;
        self.stage2.weights.validate()?;
        if self.data.fps == 0 {
            return Err(Error::Config("data.fps must be positive".into()));
        }
        if self.stage1.batch_size == 0 || self.stage2.batch_size == 0 || self.infer.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.stage2.train_refs == 0 {
            return Err(Error::Config("stage2.train_refs must be positive".into()));
        }
        if !(self.infer.ref_fraction > 0.0 && self.infer.ref_fraction <= 1.0) {
            return Err(Error::Config(format!("infer.ref_fraction must be in (0, 1], got {}", self.infer.ref_fraction)));
        }
        if self.stage2.discriminator.scales == 0 || self.stage2.discriminator.width == 0 {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        Ok(())
    }
}
