//! TOML run configuration, one section per pipeline stage.

use std::path::{Path, PathBuf};

use distilmos::model::ModelConfig;
use distilmos::ssl_backend::BackendSpec;
use distilmos::tokenizer::{DEFAULT_BATCH_SIZE, DEFAULT_K};
use distilmos::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub paths: Paths,
    pub backend: BackendSection,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub manifest: PathBuf,
    pub codebooks: PathBuf,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSection {
    #[serde(flatten)]
    pub spec: BackendSpec,
    /// Seed of the synthetic encoder's weights.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
        }
    }
}

/// Network sizes; encoder shape and cluster count come from the other
/// sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    #[serde(default = "distilmos::model::defaults::hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "distilmos::model::defaults::fp_blocks")]
    pub fp_blocks: usize,
    #[serde(default = "distilmos::model::defaults::conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "distilmos::model::defaults::blstm_layers")]
    pub blstm_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dim: distilmos::model::defaults::hidden_dim(),
            fp_blocks: distilmos::model::defaults::fp_blocks(),
            conv_kernel: distilmos::model::defaults::conv_kernel(),
            blstm_layers: distilmos::model::defaults::blstm_layers(),
        }
    }
}

impl RunConfig {
    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.manifest, &mut cfg.paths.codebooks, &mut cfg.paths.run_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backend.spec.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.training.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.tokenizer.k < 1 || self.tokenizer.batch_size < 1 {
            return Err(ConfigError("tokenizer k and batch_size must be >= 1".into()));
        }
        self.model_config().validate().map_err(|e| ConfigError(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.backend.spec.n_layers,
            ssl_dim: self.backend.spec.dim,
            hidden_dim: self.model.hidden_dim,
            fp_blocks: self.model.fp_blocks,
            conv_kernel: self.model.conv_kernel,
            blstm_layers: self.model.blstm_layers,
            n_clusters: self.tokenizer.k,
            head_mode: self.training.head_mode,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Small configuration that trains in minutes on the synthetic corpus.
    pub fn desk(manifest: PathBuf, codebooks: PathBuf, run_dir: PathBuf) -> Self {
        Self {
            paths: Paths {
                manifest,
                codebooks,
                run_dir,
            },
            backend: BackendSection {
                spec: BackendSpec::synthetic(4, 32),
                seed: 0,
            },
            tokenizer: TokenizerSection {
                k: 16,
                batch_size: 64,
                seed: 0,
            },
            model: ModelSection {
                hidden_dim: 32,
                ..ModelSection::default()
            },
            training: TrainingConfig {
                steps: 2000,
                batch_size: 16,
                lr: 1e-3,
                checkpoint_every: 200,
                ..TrainingConfig::default()
            },
        }
    }
}
