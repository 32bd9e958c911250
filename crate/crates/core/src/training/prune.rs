//! Iterative structured pruning of embedding dimensions.
//!
//! A dimension's importance is its L2 norm over the training-set embeddings;
//! each round keeps the highest-norm dimensions of the previous round and
//! retrains for a fraction of the base epoch budget.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{init_params, CompressionMode, DimSelection, ModelParams};
use crate::numerics::{column_l2_norms, Matrix};

use super::backprop::forward_sample;
use super::{TrainConfig, TrainedModel, Trainer};

/// Keeps the `keep` columns with the largest L2 norm, ties toward the lower index.
pub fn select_prune_dims(train_embeddings: &Matrix, keep: usize) -> Result<DimSelection> {
    let cols = train_embeddings.cols();
    if keep == 0 || keep > cols {
        return Err(Error::Argument(format!("keep must lie in [1, {cols}], got {keep}")));
    }
    let norms = column_l2_norms(train_embeddings)?;
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    DimSelection::new(kept, cols)
}

/// Geometric schedule `k_r = round(D * (target/D)^(r/rounds))`, clamped to be
/// non-increasing and never below `target`.
pub fn prune_schedule(embed_dim: usize, target: usize, rounds: usize) -> Result<Vec<usize>> {
    if target == 0 || target >= embed_dim {
        return Err(Error::Argument(format!(
            "pruning target must lie in [1, {}), got {target}",
            embed_dim
        )));
    }
    if rounds == 0 {
        return Err(Error::Argument("prune_rounds must be >= 1".into()));
    }
    let d = embed_dim as f64;
    let ratio = target as f64 / d;
    let mut prev = embed_dim;
    let mut out = Vec::with_capacity(rounds);
    for r in 1..=rounds {
        let k = (d * ratio.powf(r as f64 / rounds as f64)).round() as usize;
        let k = if r == rounds { target } else { k.clamp(target, prev) };
        out.push(k);
        prev = k;
    }
    Ok(out)
}

/// Epochs per retraining round: `ceil(retrain_fraction * epochs)`.
pub fn retrain_epochs(cfg: &TrainConfig) -> usize {
    // 0.2 * 15 evaluates to 3.0000000000000004; snap near-integers first
    let raw = cfg.retrain_fraction * cfg.epochs as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

fn training_embeddings(params: &ModelParams, mode: &CompressionMode, ds: &Dataset) -> Result<Matrix> {
    let dim = mode.compressed_dim(params.encoder.embed_dim());
    let mut data = Vec::with_capacity(ds.len() * dim);
    for x in ds.features().iter_rows() {
        data.extend(forward_sample(params, mode, x)?.r);
    }
    Matrix::new(ds.len(), dim, data)
}

/// Full training, then `prune_rounds` rounds of prune-and-retrain down to `target_dim`.
pub fn iterative_prune_train(ds: &Dataset, cfg: &TrainConfig, target_dim: usize) -> Result<TrainedModel> {
    let base_cfg = TrainConfig {
        mode: CompressionMode::Full,
        ..cfg.clone()
    };
    base_cfg.validate()?;
    let d = cfg.embed_dim;
    let schedule = prune_schedule(d, target_dim, cfg.prune_rounds)?;

    let mut params = init_params(
        ds.feature_dim(),
        cfg.hidden_dim,
        d,
        ds.num_identities(),
        &CompressionMode::Full,
        cfg.seed,
    )?;
    let mut trainer = Trainer::new(ds, &base_cfg);
    trainer.run(&mut params, &CompressionMode::Full, cfg.epochs)?;

    let retrain = retrain_epochs(cfg);
    let mut selection = DimSelection::prefix(d);
    let mut prune_history = Vec::with_capacity(schedule.len());
    for keep in schedule {
        let mode = CompressionMode::Pruned(selection.clone());
        let emb = training_embeddings(&params, &mode, ds)?;
        let local = select_prune_dims(&emb, keep)?;
        // classifier rows follow the current selection order
        params.classifier.wc = params.classifier.wc.select_rows(local.kept());
        let kept: Vec<usize> = local.kept().iter().map(|&i| selection.kept()[i]).collect();
        selection = DimSelection::new(kept, d)?;
        prune_history.push(selection.clone());
        trainer.run(&mut params, &CompressionMode::Pruned(selection.clone()), retrain)?;
    }

    let qat = trainer.qat();
    Ok(TrainedModel {
        params,
        mode: CompressionMode::Pruned(selection),
        qat,
        history: trainer.into_history(),
        prune_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    #[test]
    fn keep_all_and_hand_sorted() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(select_prune_dims(&m, 3).unwrap().kept(), &[0, 1, 2]);

        // column norms [5, 1, 3]
        let m = Matrix::from_rows(&[[3.0, 1.0, 0.0], [4.0, 0.0, 3.0]]).unwrap();
        assert_eq!(select_prune_dims(&m, 2).unwrap().kept(), &[0, 2]);
        assert!(select_prune_dims(&m, 0).is_err());
        assert!(select_prune_dims(&m, 4).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let m = Matrix::from_rows(&[[1.0, 1.0, 1.0, 0.5]]).unwrap();
        assert_eq!(select_prune_dims(&m, 2).unwrap().kept(), &[0, 1]);
    }

    #[test]
    fn schedule_values() {
        // round(64 * (1/8)^(r/5)) = round(42.22, 27.86, 18.38, 12.13, 8.0)
        assert_eq!(prune_schedule(64, 8, 5).unwrap(), vec![42, 28, 18, 12, 8]);
        assert_eq!(prune_schedule(64, 63, 1).unwrap(), vec![63]);
        assert_eq!(prune_schedule(4, 3, 3).unwrap(), vec![4, 3, 3]);
        assert!(prune_schedule(8, 8, 2).is_err());
        assert!(prune_schedule(8, 4, 0).is_err());
    }

    #[test]
    fn retrain_budget() {
        let c = |epochs, f| TrainConfig { epochs, retrain_fraction: f, ..TrainConfig::default() };
        assert_eq!(retrain_epochs(&c(10, 0.2)), 2);
        assert_eq!(retrain_epochs(&c(40, 0.2)), 8);
        assert_eq!(retrain_epochs(&c(12, 0.2)), 3);
        assert_eq!(retrain_epochs(&c(3, 0.2)), 1);
    }

    #[test]
    fn minimal_prune_run() {
        let ds = generate_synthetic(&SynthConfig {
            num_identities: 6,
            views_per_identity: 4,
            feature_dim: 6,
            intrinsic_dim: 3,
            view_noise: 0.05,
            seed: 2,
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            embed_dim: 8,
            hidden_dim: 8,
            prune_rounds: 1,
            ..TrainConfig::default()
        };
        let m = iterative_prune_train(&ds, &cfg, 7).unwrap();
        assert_eq!(m.epochs_run(), 5 + 1);
        assert_eq!(m.compressed_dim(), 7);
        assert_eq!(m.params.classifier.input_dim(), 7);
        assert!(iterative_prune_train(&ds, &cfg, 8).is_err());
    }
}
