use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, split_query_gallery, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate_config;
use crate::methods::MethodRegistry;
use crate::store::size_report;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantSetting {
    Off,
    On,
    Both,
}

impl QuantSetting {
    pub fn levels(self) -> &'static [bool] {
        match self {
            QuantSetting::Off => &[false],
            QuantSetting::On => &[true],
            QuantSetting::Both => &[false, true],
        }
    }
}

impl std::str::FromStr for QuantSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" | "false" | "none" => Ok(QuantSetting::Off),
            "on" | "true" | "only" => Ok(QuantSetting::On),
            "both" => Ok(QuantSetting::Both),
            other => Err(Error::Config(format!("quantization must be off|on|both, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub data: SynthConfig,
    /// Fraction of identities held out for query/gallery evaluation.
    pub holdout_fraction: f64,
    pub queries_per_identity: usize,
    pub train: TrainConfig,
    pub methods: Vec<String>,
    pub dims: Vec<usize>,
    pub quantization: QuantSetting,
    /// Record wall time per cell. Off by default so the CSV is reproducible byte for byte.
    pub timing: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            data: SynthConfig::default(),
            holdout_fraction: 0.5,
            queries_per_identity: 2,
            train: TrainConfig::default(),
            methods: vec!["slice".into(), "lowrank".into(), "prune".into()],
            dims: vec![72, 60, 48, 24, 8, 4],
            quantization: QuantSetting::Both,
            timing: false,
        }
    }
}

impl SweepConfig {
    /// The faster `D = 64` preset; its ratio grid only approximates the default one.
    pub fn fast_preset() -> Self {
        let mut cfg = Self::default();
        cfg.train.embed_dim = 64;
        cfg.dims = vec![48, 40, 32, 16, 8, 4];
        cfg
    }

    pub fn validate(&self, registry: &MethodRegistry) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("sweep needs at least one method".into()));
        }
        for m in &self.methods {
            registry.get(m)?;
        }
        let d = self.train.embed_dim;
        if let Some(&bad) = self.dims.iter().find(|&&k| k == 0 || k > d) {
            return Err(Error::Config(format!("sweep dim {bad} outside [1, {d}]")));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub compressed_dim: usize,
    pub quantized: bool,
    pub ratio: f64,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub train_epochs_total: usize,
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Cell {
    method: String,
    dim: usize,
    quantized: bool,
}

fn cells(cfg: &SweepConfig) -> Vec<Cell> {
    let d = cfg.train.embed_dim;
    let mut out = Vec::new();
    for &q in cfg.quantization.levels() {
        out.push(Cell {
            method: "full".into(),
            dim: d,
            quantized: q,
        });
    }
    for m in cfg.methods.iter().filter(|m| *m != "full") {
        for &dim in &cfg.dims {
            for &q in cfg.quantization.levels() {
                out.push(Cell {
                    method: m.clone(),
                    dim,
                    quantized: q,
                });
            }
        }
    }
    out
}

/// Trains and evaluates every (method, dim, quantized) cell plus the full baseline.
///
/// Every cell trains from the same seed, so cells share initialization and
/// triplet order and parallel execution cannot change any row.
pub fn run_sweep(cfg: &SweepConfig, registry: &MethodRegistry) -> Result<Vec<SweepRow>> {
    cfg.validate(registry)?;
    let ds = generate_synthetic(&cfg.data)?;
    let (train_ds, eval_ds) = ds.train_eval_split(cfg.holdout_fraction)?;
    let split = split_query_gallery(&eval_ds, cfg.queries_per_identity, cfg.data.seed)?;
    let d = cfg.train.embed_dim;

    cells(cfg)
        .into_par_iter()
        .map(|cell| {
            let tag = |e: Error| {
                Error::Evaluation(format!(
                    "sweep cell (method={}, dim={}, quantized={}) failed: {e}",
                    cell.method, cell.dim, cell.quantized
                ))
            };
            let start = Instant::now();
            let method = registry.get(&cell.method).map_err(tag)?;
            let train_cfg = TrainConfig {
                qat: cell.quantized,
                ..cfg.train.clone()
            };
            let model = method.train(&train_ds, &train_cfg, cell.dim).map_err(tag)?;
            let report = evaluate_config(model.retrieval(), &split, &eval_ds, &model.mode, cell.quantized).map_err(tag)?;
            let expected = size_report(d, 32, cell.dim, if cell.quantized { 8 } else { 32 }).map_err(tag)?;
            debug_assert_eq!(report.ratio, expected.ratio);
            let elapsed = start.elapsed().as_secs_f64();
            if cfg.timing {
                eprintln!(
                    "cell {}@{}{}: mAP {:.4} in {:.2}s",
                    cell.method,
                    cell.dim,
                    if cell.quantized { "+int8" } else { "" },
                    report.map,
                    elapsed
                );
            }
            Ok(SweepRow {
                method: cell.method,
                compressed_dim: report.compressed_dim,
                quantized: cell.quantized,
                ratio: expected.ratio,
                map: report.map,
                rank1: report.rank1,
                rank5: report.rank5,
                train_epochs_total: model.epochs_run(),
                wall_time: cfg.timing.then_some(elapsed),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_layout() {
        let cfg = SweepConfig {
            methods: vec!["slice".into(), "full".into(), "prune".into()],
            dims: vec![8, 4],
            ..SweepConfig::default()
        };
        let c = cells(&cfg);
        assert_eq!(c.len(), 2 + 2 * 2 * 2);
        assert_eq!((c[0].method.as_str(), c[0].dim, c[0].quantized), ("full", 96, false));
        assert_eq!((c[1].method.as_str(), c[1].quantized), ("full", true));
        assert_eq!((c[2].method.as_str(), c[2].dim, c[2].quantized), ("slice", 8, false));
        assert_eq!(c.last().unwrap().method, "prune");
    }

    #[test]
    fn default_grid_reproduces_reference_ratios() {
        let cfg = SweepConfig::default();
        let ratios: Vec<f64> = cfg
            .dims
            .iter()
            .map(|&k| size_report(cfg.train.embed_dim, 32, k, 32).unwrap().ratio)
            .collect();
        let reference: Vec<f64> = [576, 480, 384, 192, 64, 32].iter().map(|&k| 768.0 / k as f64).collect();
        assert_eq!(ratios, reference);
    }

    #[test]
    fn fast_preset_ratios() {
        let cfg = SweepConfig::fast_preset();
        let ratios: Vec<f64> = cfg.dims.iter().map(|&k| 64.0 / k as f64).collect();
        assert_eq!(ratios, vec![64.0 / 48.0, 1.6, 2.0, 4.0, 8.0, 16.0]);
    }

    #[test]
    fn validation() {
        let r = MethodRegistry::builtin();
        assert!(SweepConfig::default().validate(&r).is_ok());
        let bad = SweepConfig {
            methods: vec![],
            ..SweepConfig::default()
        };
        assert!(bad.validate(&r).is_err());
        let bad = SweepConfig {
            dims: vec![97],
            ..SweepConfig::default()
        };
        assert!(bad.validate(&r).is_err());
        let bad = SweepConfig {
            methods: vec!["pca".into()],
            ..SweepConfig::default()
        };
        assert!(bad.validate(&r).is_err());
    }
}
