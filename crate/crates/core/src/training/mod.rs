//! Losses, the SGD loop, quantization-aware training and iterative pruning.

mod backprop;
mod loss;
mod prune;
mod qat;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backprop::{triple_loss_and_grad, Gradients, LossWeights};
pub use loss::{cross_entropy_loss, triplet_loss, LossValue, TripletOutput};
pub use prune::{iterative_prune_train, prune_schedule, retrain_epochs, select_prune_dims};
pub use qat::{qat_backward_rule, qat_fake_quantize, qat_pass_mask, QatParams, ScaleCalibrator};

use crate::dataset::{sample_triplets, Dataset};
use crate::error::{Error, Result};
use crate::model::{init_params, CompressionMode, DimSelection, ModelParams};
use backprop::{forward_sample, max_abs_embedding, triplet_step};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub triplet_margin: f32,
    pub seed: u64,
    pub mode: CompressionMode,
    pub qat: bool,
    pub retrain_fraction: f64,
    pub prune_rounds: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub triplet_weight: f32,
    pub classifier_weight: f32,
    pub qat_ema_decay: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 0.05,
            triplet_margin: 0.3,
            seed: 0,
            mode: CompressionMode::Full,
            qat: false,
            retrain_fraction: 0.2,
            prune_rounds: 5,
            hidden_dim: 64,
            embed_dim: 96,
            triplet_weight: 1.0,
            classifier_weight: 1.0,
            qat_ema_decay: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.triplet_margin.is_nan() || self.triplet_margin < 0.0 {
            return Err(Error::Config(format!("triplet_margin must be >= 0, got {}", self.triplet_margin)));
        }
        if !(self.retrain_fraction > 0.0 && self.retrain_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "retrain_fraction must lie in (0, 1], got {}",
                self.retrain_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.qat_ema_decay) {
            return Err(Error::Config(format!("qat_ema_decay must lie in [0, 1), got {}", self.qat_ema_decay)));
        }
        self.mode.validate(self.embed_dim)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            margin: self.triplet_margin,
            triplet: self.triplet_weight,
            classifier: self.classifier_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub mode: CompressionMode,
    /// Frozen quantizer when trained with QAT.
    pub qat: Option<QatParams>,
    pub history: Vec<EpochLog>,
    /// Kept-dimension sets after each pruning round, outermost first.
    pub prune_history: Vec<DimSelection>,
}

impl TrainedModel {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.params.encoder.embed_dim()
    }

    pub fn compressed_dim(&self) -> usize {
        self.mode.compressed_dim(self.embed_dim())
    }
}

/// Mutable state threaded through consecutive training phases.
pub(crate) struct Trainer<'a> {
    ds: &'a Dataset,
    cfg: &'a TrainConfig,
    batch_rng: ChaCha8Rng,
    calibrator: Option<ScaleCalibrator>,
    history: Vec<EpochLog>,
}

impl<'a> Trainer<'a> {
    pub(crate) fn new(ds: &'a Dataset, cfg: &'a TrainConfig) -> Self {
        Self {
            ds,
            cfg,
            // offset so batch sampling does not reuse the initialization stream
            batch_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_BA7C_4E5D_0001),
            calibrator: cfg.qat.then(|| ScaleCalibrator::new(cfg.qat_ema_decay)),
            history: Vec::new(),
        }
    }

    pub(crate) fn run(&mut self, params: &mut ModelParams, mode: &CompressionMode, epochs: usize) -> Result<()> {
        let n = self.ds.len();
        let batches = n.div_ceil(self.cfg.batch_size);
        let weights = self.cfg.loss_weights();
        let mut grads = Gradients::zeros_like(params);
        for _ in 0..epochs {
            let epoch = self.history.len() + 1;
            let mut sum = LossValue::default();
            let mut count = 0usize;
            for _ in 0..batches {
                let batch = sample_triplets(self.ds, self.cfg.batch_size, self.batch_rng.random())?;
                let x = |i: usize| self.ds.features().row(i);
                let mut fwd = Vec::with_capacity(batch.len());
                for t in 0..batch.len() {
                    fwd.push([
                        forward_sample(params, mode, x(batch.anchors[t]))?,
                        forward_sample(params, mode, x(batch.positives[t]))?,
                        forward_sample(params, mode, x(batch.negatives[t]))?,
                    ]);
                }
                let qat = match &mut self.calibrator {
                    Some(c) => Some(c.observe(max_abs_embedding(fwd.iter().flatten()))?),
                    None => None,
                };
                grads.clear();
                let ids = self.ds.identities();
                for (t, f) in fwd.iter().enumerate() {
                    let (a, p, ng) = (batch.anchors[t], batch.positives[t], batch.negatives[t]);
                    let l = triplet_step(
                        params,
                        mode,
                        [x(a), x(p), x(ng)],
                        [&f[0], &f[1], &f[2]],
                        [ids[a], ids[p], ids[ng]],
                        &weights,
                        qat,
                        &mut grads,
                    )?;
                    sum.triplet += l.triplet;
                    sum.classifier += l.classifier;
                    sum.total += l.total;
                    count += 1;
                }
                if !sum.total.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                grads.scale(1.0 / batch.len() as f64);
                grads.apply_sgd(params, self.cfg.learning_rate);
            }
            let c = count.max(1) as f64;
            let loss = LossValue {
                triplet: sum.triplet / c,
                classifier: sum.classifier / c,
                total: sum.total / c,
            };
            if !loss.total.is_finite() || !params.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            self.history.push(EpochLog { epoch, loss });
        }
        Ok(())
    }

    pub(crate) fn qat(&self) -> Option<QatParams> {
        self.calibrator.as_ref().and_then(|c| c.current())
    }

    pub(crate) fn into_history(self) -> Vec<EpochLog> {
        self.history
    }
}

pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let params = init_params(
        ds.feature_dim(),
        cfg.hidden_dim,
        cfg.embed_dim,
        ds.num_identities(),
        &cfg.mode,
        cfg.seed,
    )?;
    train_with_params(ds, cfg, params)
}

/// Trains from caller-provided parameters instead of the seeded initialization.
pub fn train_with_params(ds: &Dataset, cfg: &TrainConfig, mut params: ModelParams) -> Result<TrainedModel> {
    cfg.validate()?;
    check_params(ds, cfg, &params)?;
    let mut trainer = Trainer::new(ds, cfg);
    trainer.run(&mut params, &cfg.mode, cfg.epochs)?;
    let qat = trainer.qat();
    Ok(TrainedModel {
        params,
        mode: cfg.mode.clone(),
        qat,
        history: trainer.into_history(),
        prune_history: Vec::new(),
    })
}

fn check_params(ds: &Dataset, cfg: &TrainConfig, p: &ModelParams) -> Result<()> {
    let e = &p.encoder;
    if e.feature_dim() != ds.feature_dim() || e.embed_dim() != cfg.embed_dim {
        return Err(Error::Config(format!(
            "encoder is {}->{}, config/dataset expect {}->{}",
            e.feature_dim(),
            e.embed_dim(),
            ds.feature_dim(),
            cfg.embed_dim
        )));
    }
    if p.classifier.num_classes() != ds.num_identities() {
        return Err(Error::Config(format!(
            "classifier has {} classes, dataset has {} identities",
            p.classifier.num_classes(),
            ds.num_identities()
        )));
    }
    if p.classifier.input_dim() != cfg.mode.classifier_dim(cfg.embed_dim) {
        return Err(Error::Config(format!(
            "classifier input {} does not match mode {}",
            p.classifier.input_dim(),
            cfg.mode
        )));
    }
    Ok(())
}

/// One CSV line per epoch: `epoch,triplet,classifier,total`.
pub fn training_log_csv(history: &[EpochLog]) -> String {
    let mut out = String::from("epoch,triplet,classifier,total\n");
    for e in history {
        let _ = writeln!(
            out,
            "{},{:.8},{:.8},{:.8}",
            e.epoch, e.loss.triplet, e.loss.classifier, e.loss.total
        );
    }
    out
}

pub fn write_training_log(path: impl AsRef<Path>, history: &[EpochLog]) -> Result<()> {
    std::fs::write(path.as_ref(), training_log_csv(history)).map_err(|e| Error::io(path.as_ref(), e))
}
