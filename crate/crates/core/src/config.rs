//! Run configuration, read from TOML with dotted keys (`train.lr = 0.0001`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::{published, ComponentCost};
use crate::data::MixtureDatasetConfig;
use crate::denoiser::DenoiserArch;
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub latent_dim: usize,
    pub seed: u64,
}

/// Which weights the sampler uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleWeights {
    #[default]
    Ema,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub blocks: usize,
    #[serde(default)]
    pub sample_weights: SampleWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    /// Step counts swept by the evaluation and the step ablation.
    pub steps: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 5000,
            steps: vec![2, 4, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    /// Training seeds; every arm is trained once per seed.
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

/// Per-forward GFLOPs of the full-scale components used in paper mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub pixel_encoder_gflops: f64,
    pub pixel_decoder_gflops: f64,
    pub denoiser_gflops: f64,
    pub decoder_gflops: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            pixel_encoder_gflops: published::pixel_encoder().flops_per_forward,
            pixel_decoder_gflops: published::pixel_decoder().flops_per_forward,
            denoiser_gflops: published::latent_denoiser().flops_per_forward,
            decoder_gflops: published::latent_decoder().flops_per_forward,
        }
    }
}

impl CostConfig {
    /// `(encoder, decoder)` of the pixel loop and `(denoiser, decoder)` of the
    /// latent pipeline.
    pub fn components(&self) -> [ComponentCost; 4] {
        [
            ComponentCost { flops_per_forward: self.pixel_encoder_gflops, ..published::pixel_encoder() },
            ComponentCost { flops_per_forward: self.pixel_decoder_gflops, ..published::pixel_decoder() },
            ComponentCost { flops_per_forward: self.denoiser_gflops, ..published::latent_denoiser() },
            ComponentCost { flops_per_forward: self.decoder_gflops, ..published::latent_decoder() },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub data: MixtureDatasetConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SamplerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
    #[serde(default)]
    pub cost: CostConfig,
}

const REFERENCE_TOML: &str = include_str!("../../../configs/reference.toml");

impl RunConfig {
    /// The configuration the end-to-end checks are run with.
    pub fn reference() -> Self {
        Self::from_toml_str(REFERENCE_TOML).expect("bundled reference config is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let safe = |c: char| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.');
        if self.run_id.is_empty() || !self.run_id.chars().all(safe) || self.run_id.starts_with('.') {
            return Err(Error::Config(format!(
                "run_id {:?} must be non-empty and use only letters, digits, '-', '_' and '.'",
                self.run_id
            )));
        }
        self.data.validate()?;
        if self.tokenizer.latent_dim == 0 || self.tokenizer.latent_dim > self.data.data_dim {
            return Err(Error::Config(format!(
                "tokenizer.latent_dim must be in 1..={}",
                self.data.data_dim
            )));
        }
        self.arch().validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        if self.eval.steps.contains(&0) {
            return Err(Error::Config("eval.steps entries must be >= 1".into()));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn arch(&self) -> DenoiserArch {
        DenoiserArch {
            latent_dim: self.tokenizer.latent_dim,
            hidden: self.model.hidden,
            blocks: self.model.blocks,
            classes: self.data.classes,
        }
    }
}
