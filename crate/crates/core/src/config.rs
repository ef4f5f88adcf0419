//! Run configuration: every hyperparameter in one serde document, with
//! dotted-path overrides and up-front validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::manifold::ManifoldConfig;
use crate::similarity::SimilarityConfig;
use crate::trainer::loss::LossConfig;
use crate::trainer::sampler::SamplerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Hidden layer widths; empty means a single linear layer.
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// EMA momentum of the momentum encoder.
    pub gamma: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256],
            output_dim: 32,
            gamma: 0.999,
        }
    }
}

impl NetworkConfig {
    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(input_dim);
        s.extend_from_slice(&self.hidden);
        s.push(self.output_dim);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub proxy_lr_multiplier: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            proxy_lr_multiplier: 100.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    /// Directory for checkpoints and the metric log.
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every subsystem seed is derived from it.
    pub seed: u64,
    pub epochs: u64,
    pub n_proxies: usize,
    /// Epochs between refreshes of the sampling k-NN lists.
    pub knn_refresh_epochs: u64,
    /// Epochs between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// K values reported by per-epoch retrieval evaluation (empty disables).
    pub eval_recall_k: Vec<usize>,
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub manifold: ManifoldConfig,
    pub similarity: SimilarityConfig,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 200,
            n_proxies: 100,
            knn_refresh_epochs: 1,
            checkpoint_every: 0,
            eval_recall_k: vec![1],
            network: NetworkConfig::default(),
            optimizer: OptimizerConfig::default(),
            manifold: ManifoldConfig::default(),
            similarity: SimilarityConfig::default(),
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Subsystems that draw randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    NetworkInit,
    ProxyInit,
    Sampler,
    Augment,
    KMeans,
    CorrelationPairs,
}

impl SeedStream {
    fn tag(self) -> u64 {
        match self {
            SeedStream::NetworkInit => 1,
            SeedStream::ProxyInit => 2,
            SeedStream::Sampler => 3,
            SeedStream::Augment => 4,
            SeedStream::KMeans => 5,
            SeedStream::CorrelationPairs => 6,
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for `stream`, optionally specialised by a counter such as the step.
pub fn derive_seed(root: u64, stream: SeedStream, counter: u64) -> u64 {
    mix(mix(mix(root) ^ stream.tag()) ^ counter)
}

impl RunConfig {
    pub fn derive_seed(&self, stream: SeedStream, counter: u64) -> u64 {
        derive_seed(self.seed, stream, counter)
    }

    /// Checks every section against the dataset input dimension.
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        let d = self.network.output_dim;
        if d == 0 || self.network.hidden.contains(&0) {
            return Err(Error::config("network", "layer widths must be positive"));
        }
        if input_dim == 0 {
            return Err(Error::config("network", "input dimension is zero"));
        }
        if !(0.0..=1.0).contains(&self.network.gamma) {
            return Err(Error::config("network.gamma", "must lie in [0, 1]"));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be finite and >= 0"));
        }
        if !(self.optimizer.proxy_lr_multiplier >= 0.0 && self.optimizer.proxy_lr_multiplier.is_finite()) {
            return Err(Error::config(
                "optimizer.proxy_lr_multiplier",
                "must be finite and >= 0",
            ));
        }
        if self.knn_refresh_epochs == 0 {
            return Err(Error::config("knn_refresh_epochs", "must be positive"));
        }
        self.manifold.validate(d)?;
        self.similarity.validate()?;
        self.sampler.validate(self.manifold.m)?;
        self.loss.validate()?;
        if self.sampler.batch_size < 2 {
            return Err(Error::config("sampler.batch_size", "need at least two rows"));
        }
        if self.sampler.batch_size < self.manifold.m {
            return Err(Error::config(
                "sampler.batch_size",
                "batch cannot hold an m-point neighborhood",
            ));
        }
        if self.eval_recall_k.contains(&0) {
            return Err(Error::config("eval_recall_k", "K must be positive"));
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        self.similarity.warnings()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Canonical form: pretty JSON with fields in declaration order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value`, where `key` is a dotted path such as
    /// `similarity.n_alpha` and `value` is JSON (bare words are strings).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("override `{assignment}` lacks `=`")))?;
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Invalid(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::Invalid(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }
}
