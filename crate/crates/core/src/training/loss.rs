use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-component loss. `total` is the weighted sum, which equals
/// `triplet + classifier` under the default unit weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub triplet: f64,
    pub classifier: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

/// Unit direction `(u - v) / |u - v|` and the distance; a zero vector at distance 0.
fn distance_and_direction(u: &[f32], v: &[f32]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = u.iter().zip(v).map(|(&a, &b)| f64::from(a) - f64::from(b)).collect();
    let d = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    if d > 0.0 {
        (d, diff.into_iter().map(|x| x / d).collect())
    } else {
        (0.0, vec![0.0; diff.len()])
    }
}

/// Hinge triplet loss `max(0, d(a,p) - d(a,n) + margin)` with exact subgradients.
pub fn triplet_loss(a: &[f32], p: &[f32], n: &[f32], margin: f32) -> Result<TripletOutput> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::dim(
            "triplet_loss",
            format!("anchor {}", a.len()),
            format!("positive {} / negative {}", p.len(), n.len()),
        ));
    }
    let len = a.len();
    let (d_ap, dir_ap) = distance_and_direction(a, p);
    let (d_an, dir_an) = distance_and_direction(a, n);
    let value = d_ap - d_an + f64::from(margin);
    if value <= 0.0 {
        return Ok(TripletOutput {
            loss: 0.0,
            grad_anchor: vec![0.0; len],
            grad_positive: vec![0.0; len],
            grad_negative: vec![0.0; len],
        });
    }
    Ok(TripletOutput {
        loss: value,
        grad_anchor: dir_ap.iter().zip(&dir_an).map(|(x, y)| x - y).collect(),
        grad_positive: dir_ap.iter().map(|x| -x).collect(),
        grad_negative: dir_an,
    })
}

/// Softmax cross-entropy with max-subtraction; gradient is `softmax - onehot`.
pub fn cross_entropy_loss(logits: &[f32], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (f64::from(logits[label]) - max);
    let mut grad: Vec<f64> = exps.into_iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}
