//! Hand-derived forward/backward pass of the composed model for one triplet.

use crate::error::{Error, Result};
use crate::model::{hidden_pre, CompressionMode, ModelParams};
use crate::numerics::{matvec_t, Matrix};

use super::loss::{cross_entropy_loss, triplet_loss, LossValue};
use super::qat::{qat_fake_quantize, qat_pass_mask, QatParams};

/// Loss hyperparameters shared by training and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub margin: f32,
    pub triplet: f32,
    pub classifier: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            margin: 0.3,
            triplet: 1.0,
            classifier: 1.0,
        }
    }
}

/// Gradient buffers laid out like [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Vec<f64>>,
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const WC: usize = 4;
const BC: usize = 5;
const A: usize = 6;
const B: usize = 7;

impl Gradients {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            tensors: p.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn clear(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().for_each(|t| t.iter_mut().for_each(|v| *v *= factor));
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// Plain SGD step `p -= lr * g`.
    pub fn apply_sgd(&self, params: &mut ModelParams, lr: f32) {
        let lr = f64::from(lr);
        for (p, g) in params.tensors_mut().into_iter().zip(&self.tensors) {
            p.iter_mut().zip(g).for_each(|(w, d)| *w = (f64::from(*w) - lr * d) as f32);
        }
    }
}

/// Activations kept from the forward pass of one sample.
#[derive(Debug, Clone)]
pub(crate) struct SampleForward {
    pub(crate) h_pre: Vec<f32>,
    pub(crate) h: Vec<f32>,
    pub(crate) y: Vec<f32>,
    /// Retrieval embedding before fake quantization.
    pub(crate) r: Vec<f32>,
}

pub(crate) fn forward_sample(p: &ModelParams, mode: &CompressionMode, x: &[f32]) -> Result<SampleForward> {
    let h_pre = hidden_pre(&p.encoder, x)?;
    let h: Vec<f32> = h_pre.iter().map(|v| v.max(0.0)).collect();
    let mut y = matvec_t(&p.encoder.w2, &h)?;
    y.iter_mut().zip(&p.encoder.b2).for_each(|(v, b)| *v += *b);
    let r = crate::model::reduce_embedding(&y, p.head.as_ref(), mode)?;
    Ok(SampleForward { h_pre, h, y, r })
}

/// Forward quantities that depend on the quantizer, plus the classifier output.
struct Head {
    r_hat: Vec<f32>,
    pass: Option<Vec<bool>>,
    c_in: Vec<f32>,
    logits: Vec<f32>,
}

fn forward_head(p: &ModelParams, s: &SampleForward, qat: Option<QatParams>) -> Result<Head> {
    let (r_hat, pass) = match qat {
        Some(q) => (qat_fake_quantize(&s.r, q), Some(qat_pass_mask(&s.r, q))),
        None => (s.r.clone(), None),
    };
    let c_in = match &p.head {
        Some(h) => matvec_t(&h.b, &r_hat)?,
        None => r_hat.clone(),
    };
    if c_in.len() != p.classifier.input_dim() {
        return Err(Error::Config(format!(
            "classifier expects {} inputs, mode produces {}",
            p.classifier.input_dim(),
            c_in.len()
        )));
    }
    let mut logits = matvec_t(&p.classifier.wc, &c_in)?;
    logits.iter_mut().zip(&p.classifier.bc).for_each(|(v, b)| *v += *b);
    Ok(Head {
        r_hat,
        pass,
        c_in,
        logits,
    })
}

/// `grad[i][j] += u[i] * v[j]` for a row-major `(u.len(), v.len())` buffer.
fn add_outer(grad: &mut [f64], u: &[f32], v: &[f64]) {
    let cols = v.len();
    for (i, &ui) in u.iter().enumerate() {
        let ui = f64::from(ui);
        if ui == 0.0 {
            continue;
        }
        for (g, &vj) in grad[i * cols..(i + 1) * cols].iter_mut().zip(v) {
            *g += ui * vj;
        }
    }
}

/// `m · v` for row-major `m` and an `f64` vector.
fn matvec_f64(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter_rows()
        .map(|row| row.iter().zip(v).map(|(&a, &b)| f64::from(a) * b).sum())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn backward_sample(
    p: &ModelParams,
    mode: &CompressionMode,
    x: &[f32],
    s: &SampleForward,
    head: &Head,
    g_rhat_triplet: &[f64],
    g_logits: &[f64],
    grads: &mut Gradients,
) {
    let t = &mut grads.tensors;

    // classifier
    t[BC].iter_mut().zip(g_logits).for_each(|(a, b)| *a += b);
    add_outer(&mut t[WC], &head.c_in, g_logits);
    let g_cin = matvec_f64(&p.classifier.wc, g_logits);

    let mut g_rhat = match &p.head {
        Some(h) => {
            add_outer(&mut t[B], &head.r_hat, &g_cin);
            matvec_f64(&h.b, &g_cin)
        }
        None => g_cin,
    };
    g_rhat.iter_mut().zip(g_rhat_triplet).for_each(|(a, b)| *a += b);

    // straight-through estimator
    if let Some(pass) = &head.pass {
        g_rhat.iter_mut().zip(pass).for_each(|(g, &ok)| {
            if !ok {
                *g = 0.0;
            }
        });
    }
    let g_r = g_rhat;

    let d = s.y.len();
    let g_y = match mode {
        CompressionMode::Full => g_r,
        CompressionMode::Slice(k) => {
            let mut g = vec![0.0; d];
            g[..*k].copy_from_slice(&g_r);
            g
        }
        CompressionMode::Pruned(sel) => {
            let mut g = vec![0.0; d];
            sel.kept().iter().zip(&g_r).for_each(|(&i, &v)| g[i] = v);
            g
        }
        CompressionMode::LowRank(_) => {
            let h = p.head.as_ref().expect("low-rank mode carries a head");
            add_outer(&mut t[A], &s.y, &g_r);
            matvec_f64(&h.a, &g_r)
        }
    };

    // encoder
    t[B2].iter_mut().zip(&g_y).for_each(|(a, b)| *a += b);
    add_outer(&mut t[W2], &s.h, &g_y);
    let g_h = matvec_f64(&p.encoder.w2, &g_y);
    let g_pre: Vec<f64> = g_h
        .iter()
        .zip(&s.h_pre)
        .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
        .collect();
    t[B1].iter_mut().zip(&g_pre).for_each(|(a, b)| *a += b);
    add_outer(&mut t[W1], x, &g_pre);
}

/// Loss of one triplet from cached forwards; accumulates gradients into `grads`.
///
/// The triplet loss acts on the (fake-quantized) retrieval embeddings; the
/// classifier loss is the mean cross-entropy over the three samples.
#[allow(clippy::too_many_arguments)]
pub(crate) fn triplet_step(
    p: &ModelParams,
    mode: &CompressionMode,
    xs: [&[f32]; 3],
    fwd: [&SampleForward; 3],
    labels: [usize; 3],
    weights: &LossWeights,
    qat: Option<QatParams>,
    grads: &mut Gradients,
) -> Result<LossValue> {
    let heads = [
        forward_head(p, fwd[0], qat)?,
        forward_head(p, fwd[1], qat)?,
        forward_head(p, fwd[2], qat)?,
    ];
    let trip = triplet_loss(&heads[0].r_hat, &heads[1].r_hat, &heads[2].r_hat, weights.margin)?;
    let wt = f64::from(weights.triplet);
    let wc = f64::from(weights.classifier) / 3.0;
    let trip_grads = [&trip.grad_anchor, &trip.grad_positive, &trip.grad_negative];

    let mut ce_sum = 0.0;
    for i in 0..3 {
        let (ce, g) = cross_entropy_loss(&heads[i].logits, labels[i])?;
        ce_sum += ce;
        let g_logits: Vec<f64> = g.into_iter().map(|v| v * wc).collect();
        let g_trip: Vec<f64> = trip_grads[i].iter().map(|v| v * wt).collect();
        backward_sample(p, mode, xs[i], fwd[i], &heads[i], &g_trip, &g_logits, grads);
    }
    let classifier = ce_sum / 3.0;
    Ok(LossValue {
        triplet: trip.loss,
        classifier,
        total: wt * trip.loss + f64::from(weights.classifier) * classifier,
    })
}

/// Loss and gradient of the composed model on a single triplet.
pub fn triple_loss_and_grad(
    p: &ModelParams,
    mode: &CompressionMode,
    xs: [&[f32]; 3],
    labels: [usize; 3],
    weights: &LossWeights,
    qat: Option<QatParams>,
) -> Result<(LossValue, Gradients)> {
    let fwd = [
        forward_sample(p, mode, xs[0])?,
        forward_sample(p, mode, xs[1])?,
        forward_sample(p, mode, xs[2])?,
    ];
    let mut grads = Gradients::zeros_like(p);
    let loss = triplet_step(p, mode, xs, [&fwd[0], &fwd[1], &fwd[2]], labels, weights, qat, &mut grads)?;
    Ok((loss, grads))
}

/// Maximum `|r|` over a set of cached forwards.
pub(crate) fn max_abs_embedding<'a>(fwd: impl IntoIterator<Item = &'a SampleForward>) -> f32 {
    fwd.into_iter()
        .flat_map(|s| s.r.iter())
        .fold(0.0f32, |m, &v| m.max(v.abs()))
}
