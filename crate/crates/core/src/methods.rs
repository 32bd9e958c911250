//! Compression methods behind a common trait, looked up by name.
//!
//! The sweep harness and the CLI only see [`CompressionMethod`] trait objects;
//! adding a method means implementing the trait and registering it.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::CompressionMode;
use crate::training::{iterative_prune_train, train, TrainConfig, TrainedModel};

pub trait CompressionMethod: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    /// Trains a model whose stored embedding has `dim` dimensions.
    fn train(&self, ds: &Dataset, cfg: &TrainConfig, dim: usize) -> Result<TrainedModel>;
}

fn train_in_mode(ds: &Dataset, cfg: &TrainConfig, mode: CompressionMode) -> Result<TrainedModel> {
    train(ds, &TrainConfig { mode, ..cfg.clone() })
}

pub struct FullMethod;

impl CompressionMethod for FullMethod {
    fn name(&self) -> &'static str {
        "full"
    }

    fn description(&self) -> &'static str {
        "uncompressed baseline at the full embedding width"
    }

    fn train(&self, ds: &Dataset, cfg: &TrainConfig, dim: usize) -> Result<TrainedModel> {
        if dim != cfg.embed_dim {
            return Err(Error::Config(format!(
                "full method stores all {} dims, got dim {dim}",
                cfg.embed_dim
            )));
        }
        train_in_mode(ds, cfg, CompressionMode::Full)
    }
}

pub struct SliceMethod;

impl CompressionMethod for SliceMethod {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn description(&self) -> &'static str {
        "train and store only the first k embedding dims from initialization"
    }

    fn train(&self, ds: &Dataset, cfg: &TrainConfig, dim: usize) -> Result<TrainedModel> {
        train_in_mode(ds, cfg, CompressionMode::Slice(dim))
    }
}

pub struct LowRankMethod;

impl CompressionMethod for LowRankMethod {
    fn name(&self) -> &'static str {
        "lowrank"
    }

    fn description(&self) -> &'static str {
        "learned rank-k projection after the encoder, re-expanded for the classifier"
    }

    fn train(&self, ds: &Dataset, cfg: &TrainConfig, dim: usize) -> Result<TrainedModel> {
        train_in_mode(ds, cfg, CompressionMode::LowRank(dim))
    }
}

pub struct PruneMethod;

impl CompressionMethod for PruneMethod {
    fn name(&self) -> &'static str {
        "prune"
    }

    fn description(&self) -> &'static str {
        "iterative structured pruning of low-norm dims with short retraining rounds"
    }

    fn train(&self, ds: &Dataset, cfg: &TrainConfig, dim: usize) -> Result<TrainedModel> {
        if dim == cfg.embed_dim {
            // nothing to prune
            return train_in_mode(ds, cfg, CompressionMode::Full);
        }
        iterative_prune_train(ds, cfg, dim)
    }
}

#[derive(Clone, Default)]
pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Arc<dyn CompressionMethod>>,
}

impl MethodRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding `full`, `slice`, `lowrank` and `prune`.
    pub fn builtin() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(FullMethod));
        r.register(Arc::new(SliceMethod));
        r.register(Arc::new(LowRankMethod));
        r.register(Arc::new(PruneMethod));
        r
    }

    /// Registers a method, replacing any previous one with the same name.
    pub fn register(&mut self, method: Arc<dyn CompressionMethod>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn CompressionMethod>> {
        self.methods.get(name).cloned().ok_or_else(|| {
            Error::Config(format!(
                "unknown method `{name}` (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }
}
