//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reid_compress::model::{init_params, CompressionMode, DimSelection, ModelParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

// ---------------------------------------------------------------- retrieval

/// Metrics computed by sorting on exact integer squared distances.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteMetrics {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub kept: usize,
    pub dropped: usize,
}

pub fn brute_rank(query: &[i32], gallery: &[Vec<i32>]) -> Vec<usize> {
    let mut keyed: Vec<(i64, usize)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let d2 = query.iter().zip(g).map(|(&a, &b)| i64::from(a - b).pow(2)).sum();
            (d2, i)
        })
        .collect();
    keyed.sort();
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// AP from the textbook definition: mean over relevant items of precision at their rank.
pub fn brute_ap(order: &[usize], query_label: u32, gallery_labels: &[u32]) -> Option<f64> {
    let relevant_ranks: Vec<usize> = (1..=order.len())
        .filter(|&rank| gallery_labels[order[rank - 1]] == query_label)
        .collect();
    if relevant_ranks.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for (n, &rank) in relevant_ranks.iter().enumerate() {
        total += (n + 1) as f64 / rank as f64;
    }
    Some(total / relevant_ranks.len() as f64)
}

pub fn brute_metrics(
    queries: &[Vec<i32>],
    query_labels: &[u32],
    gallery: &[Vec<i32>],
    gallery_labels: &[u32],
) -> Option<BruteMetrics> {
    let mut aps = Vec::new();
    let mut first_hits = Vec::new();
    for (q, &ql) in queries.iter().zip(query_labels) {
        let order = brute_rank(q, gallery);
        if let Some(ap) = brute_ap(&order, ql, gallery_labels) {
            aps.push(ap);
            first_hits.push(order.iter().position(|&g| gallery_labels[g] == ql).unwrap());
        }
    }
    if aps.is_empty() {
        return None;
    }
    let n = aps.len() as f64;
    let mut sum = 0.0;
    for ap in &aps {
        sum += ap;
    }
    Some(BruteMetrics {
        map: sum / n,
        rank1: first_hits.iter().filter(|&&h| h < 1).count() as f64 / n,
        rank5: first_hits.iter().filter(|&&h| h < 5).count() as f64 / n,
        kept: aps.len(),
        dropped: queries.len() - aps.len(),
    })
}

// ---------------------------------------------------------------- pruning

/// Best subset of `keep` columns by retained squared Frobenius norm. Among exact
/// ties the lexicographically smallest index list wins. Returns (indices, score, runner-up score).
pub fn exhaustive_prune(cols: usize, col_sq: &[f64], keep: usize) -> (Vec<usize>, f64, f64) {
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut second = f64::NEG_INFINITY;
    for mask in 0u32..(1 << cols) {
        if mask.count_ones() as usize != keep {
            continue;
        }
        let idx: Vec<usize> = (0..cols).filter(|&j| mask >> j & 1 == 1).collect();
        let score: f64 = idx.iter().map(|&j| col_sq[j]).sum();
        match &best {
            None => best = Some((score, idx)),
            Some((b, bi)) => {
                if score > *b || (score == *b && idx < *bi) {
                    second = second.max(*b);
                    best = Some((score, idx));
                } else {
                    second = second.max(score);
                }
            }
        }
    }
    let (score, idx) = best.expect("keep <= cols");
    (idx, score, second)
}

// ---------------------------------------------------------------- model in f64

pub const MARGIN: f32 = 5.0;

/// Tensors in checkpoint order as f64.
pub fn params_f64(p: &ModelParams) -> Vec<Vec<f64>> {
    p.tensors().iter().map(|t| t.iter().map(|&v| f64::from(v)).collect()).collect()
}

fn matvec_t(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    assert_eq!(m.len(), rows * cols);
    assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += m[r * cols + c] * x[r];
        }
    }
    out
}

pub struct Dims {
    pub f: usize,
    pub h: usize,
    pub d: usize,
    pub c: usize,
}

/// Retrieval embedding of one input before any quantization.
pub fn oracle_embedding(theta: &[Vec<f64>], dims: &Dims, mode: &CompressionMode, x: &[f64]) -> Vec<f64> {
    let mut h = matvec_t(&theta[0], dims.f, dims.h, x);
    for (v, b) in h.iter_mut().zip(&theta[1]) {
        *v = (*v + b).max(0.0);
    }
    let mut y = matvec_t(&theta[2], dims.h, dims.d, &h);
    for (v, b) in y.iter_mut().zip(&theta[3]) {
        *v += b;
    }
    match mode {
        CompressionMode::Full => y,
        CompressionMode::Slice(k) => y[..*k].to_vec(),
        CompressionMode::Pruned(sel) => sel.kept().iter().map(|&i| y[i]).collect(),
        CompressionMode::LowRank(k) => matvec_t(&theta[6], dims.d, *k, &y),
    }
}

pub fn oracle_hidden_pre(theta: &[Vec<f64>], dims: &Dims, x: &[f64]) -> Vec<f64> {
    let mut h = matvec_t(&theta[0], dims.f, dims.h, x);
    for (v, b) in h.iter_mut().zip(&theta[1]) {
        *v += b;
    }
    h
}

fn dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub fn oracle_triplet(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    (dist(a, p) - dist(a, n) + margin).max(0.0)
}

pub fn oracle_cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Total loss of the composed model on one triplet. `offsets` are frozen
/// per-sample additive shifts applied to the retrieval embedding, which
/// reproduces the straight-through surrogate of fake quantization.
pub fn oracle_loss(
    theta: &[Vec<f64>],
    dims: &Dims,
    mode: &CompressionMode,
    xs: &[Vec<f64>; 3],
    labels: [usize; 3],
    margin: f64,
    offsets: Option<&[Vec<f64>; 3]>,
) -> f64 {
    let mut r: Vec<Vec<f64>> = xs.iter().map(|x| oracle_embedding(theta, dims, mode, x)).collect();
    if let Some(off) = offsets {
        for (ri, oi) in r.iter_mut().zip(off) {
            for (v, o) in ri.iter_mut().zip(oi) {
                *v += o;
            }
        }
    }
    let trip = oracle_triplet(&r[0], &r[1], &r[2], margin);
    let mut ce = 0.0;
    for i in 0..3 {
        let c_in = match mode {
            CompressionMode::LowRank(k) => matvec_t(&theta[7], *k, dims.d, &r[i]),
            _ => r[i].clone(),
        };
        let mut logits = matvec_t(&theta[4], c_in.len(), dims.c, &c_in);
        for (v, b) in logits.iter_mut().zip(&theta[5]) {
            *v += b;
        }
        ce += oracle_cross_entropy(&logits, labels[i]);
    }
    trip + ce / 3.0
}

/// Central-difference gradient of `f` over every entry of `theta`.
pub fn central_diff(theta: &[Vec<f64>], eps: f64, f: impl Fn(&[Vec<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut work = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for t in 0..theta.len() {
        let mut g = vec![0.0; theta[t].len()];
        for i in 0..theta[t].len() {
            let orig = work[t][i];
            work[t][i] = orig + eps;
            let up = f(&work);
            work[t][i] = orig - eps;
            let down = f(&work);
            work[t][i] = orig;
            g[i] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both are ~0.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Random small model with one of the four modes.
pub fn random_model(rng: &mut ChaCha8Rng, mode_kind: usize) -> (ModelParams, CompressionMode, Dims) {
    let dims = Dims {
        f: rng.random_range(2..=6),
        h: rng.random_range(3..=8),
        d: rng.random_range(4..=10),
        c: rng.random_range(2..=5),
    };
    let k = rng.random_range(1..=dims.d);
    let mode = match mode_kind {
        0 => CompressionMode::Full,
        1 => CompressionMode::Slice(k),
        2 => CompressionMode::LowRank(k),
        _ => {
            let mut all: Vec<usize> = (0..dims.d).collect();
            for i in (1..all.len()).rev() {
                all.swap(i, rng.random_range(0..=i));
            }
            all.truncate(k);
            all.sort_unstable();
            CompressionMode::Pruned(DimSelection::new(all, dims.d).unwrap())
        }
    };
    let p = init_params(dims.f, dims.h, dims.d, dims.c, &mode, rng.random()).unwrap();
    (p, mode, dims)
}
