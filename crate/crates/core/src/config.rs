//! Run configuration: strict TOML parsing, validation and a stable hash.
//!
//! Every section and key is optional; missing values take their defaults
//! and unknown keys are rejected. The materialized configuration, with all
//! defaults filled in, is what gets hashed and echoed into reports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptConfig;
use crate::episodes::{BenchmarkSpec, EpisodeShape};
use crate::error::{Error, Result};
use crate::meta_train::MetaTrainConfig;
use crate::models::ModelConfig;
use crate::prototypes::PrototypeMethod;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub n_tasks: usize,
    /// Write one fine-tuning trace per task under `traces/`.
    pub write_traces: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            n_tasks: 200,
            write_traces: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every random stream derives from it.
    pub seed: u64,
    /// Parent of the per-config artifact directory. Not part of the hash.
    pub output_dir: PathBuf,
    pub episode: EpisodeShape,
    pub model: ModelConfig,
    pub bench: BenchmarkSpec,
    pub meta_train: MetaTrainConfig,
    pub adapt: AdaptConfig,
    pub harness: HarnessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            episode: EpisodeShape::default(),
            model: ModelConfig::default(),
            bench: BenchmarkSpec::default(),
            meta_train: MetaTrainConfig::default(),
            adapt: AdaptConfig::default(),
            harness: HarnessConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.model.validate()?;
        self.bench.validate()?;
        self.meta_train.validate()?;
        self.adapt.validate()?;
        if self.episode.n_way > self.bench.target_classes || self.episode.n_way > self.bench.source_classes {
            return Err(Error::config(format!(
                "episode.n_way = {} exceeds the classes available in bench.source_classes or bench.target_classes",
                self.episode.n_way
            )));
        }
        Ok(())
    }

    /// Number of embeddings the PCN concatenates: the shot count, or
    /// `adapt.cluster_k` when the shot count is larger.
    pub fn pcn_k_in(&self) -> usize {
        self.episode.k_shot.min(self.adapt.cluster_k)
    }

    /// Prototype construction used during meta-training.
    pub fn train_method(&self) -> Result<PrototypeMethod> {
        PrototypeMethod::for_shots(self.episode.k_shot, self.pcn_k_in())
    }

    /// Canonical JSON of the materialized config, keys sorted, without
    /// `output_dir`.
    pub fn canonical_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        serde_json::to_string(&v).map_err(|e| Error::Config(e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn config_hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }

    /// The materialized config as TOML.
    pub fn echo(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// `<output_dir>/<config_hash>`.
    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.output_dir.join(self.config_hash()?))
    }
}
