//! Model checkpoints in the `EMB1` parameter-block layout.
//!
//! Tensor order: W1, b1, W2, b2, Wc, bc, then A and B for low-rank models.
//! Biases are stored as `1 x n` tensors. The metadata blob is JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassifierParams, CompressionMode, DimSelection, EncoderParams, LowRankHead, ModelParams};
use crate::numerics::Matrix;
use crate::store::{decode_param_block, encode_param_block};
use crate::training::{QatParams, TrainedModel};

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    mode: CompressionMode,
    qat_scale: Option<f32>,
    prune_history: Vec<DimSelection>,
    epochs_run: usize,
}

fn row(v: &[f32]) -> Matrix {
    Matrix::new(1, v.len(), v.to_vec()).expect("parameters are finite")
}

pub fn encode_checkpoint(model: &TrainedModel) -> Result<Vec<u8>> {
    let p = &model.params;
    let (b1, b2, bc) = (row(&p.encoder.b1), row(&p.encoder.b2), row(&p.classifier.bc));
    let mut tensors = vec![&p.encoder.w1, &b1, &p.encoder.w2, &b2, &p.classifier.wc, &bc];
    if let Some(h) = &p.head {
        tensors.push(&h.a);
        tensors.push(&h.b);
    }
    let meta = Meta {
        mode: model.mode.clone(),
        qat_scale: model.qat.map(|q| q.scale()),
        prune_history: model.prune_history.clone(),
        epochs_run: model.epochs_run(),
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    encode_param_block(&tensors, &meta)
}

/// Decodes a checkpoint. The per-epoch loss history is not stored.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainedModel> {
    let (tensors, meta) = decode_param_block(bytes)?;
    let meta: Meta = serde_json::from_slice(&meta).map_err(|e| Error::Format {
        field: "meta",
        offset: 0,
        detail: e.to_string(),
    })?;
    let bad = |detail: String| Error::Format {
        field: "tensor_table",
        offset: 24,
        detail,
    };
    let mut it = tensors.into_iter();
    let mut next = |name: &str| it.next().ok_or_else(|| bad(format!("missing tensor {name}")));
    let w1 = next("W1")?;
    let b1 = next("b1")?.into_vec();
    let w2 = next("W2")?;
    let b2 = next("b2")?.into_vec();
    let wc = next("Wc")?;
    let bc = next("bc")?.into_vec();
    let head = match meta.mode {
        CompressionMode::LowRank(_) => Some(LowRankHead::new(next("A")?, next("B")?)?),
        _ => None,
    };
    if w1.cols() != b1.len() || w2.rows() != w1.cols() || w2.cols() != b2.len() || wc.cols() != bc.len() {
        return Err(bad("tensor shapes are inconsistent".into()));
    }
    let params = ModelParams {
        encoder: EncoderParams { w1, b1, w2, b2 },
        classifier: ClassifierParams { wc, bc },
        head,
    };
    meta.mode.validate(params.encoder.embed_dim())?;
    Ok(TrainedModel {
        params,
        mode: meta.mode,
        qat: meta.qat_scale.map(QatParams::new).transpose()?,
        history: Vec::new(),
        prune_history: meta.prune_history,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &TrainedModel) -> Result<u64> {
    let bytes = encode_checkpoint(model)?;
    std::fs::write(path.as_ref(), &bytes).map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_checkpoint(&bytes)
}
