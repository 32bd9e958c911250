//! Encoder, identity classifier and the embedding-space heads.
//!
//! The encoder is a two-layer MLP whose output vector stands in for a
//! transformer's summary token: one `D`-vector per sample. Compression modes
//! act on that vector.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matvec_t, Matrix};

/// Strictly increasing dimension indices kept by slicing or pruning.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DimSelection {
    kept: Vec<usize>,
}

impl DimSelection {
    pub fn new(kept: Vec<usize>, embed_dim: usize) -> Result<Self> {
        if kept.is_empty() {
            return Err(Error::Argument("selection must keep at least one dimension".into()));
        }
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(format!("selection must be strictly increasing: {kept:?}")));
        }
        if let Some(&last) = kept.last() {
            if last >= embed_dim {
                return Err(Error::dim("DimSelection::new", format!("index {last}"), format!("embed dim {embed_dim}")));
            }
        }
        Ok(Self { kept })
    }

    /// The first `k` dimensions.
    pub fn prefix(k: usize) -> Self {
        assert!(k >= 1, "prefix selection needs k >= 1");
        Self { kept: (0..k).collect() }
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn is_subset_of(&self, other: &DimSelection) -> bool {
        self.kept.iter().all(|k| other.kept.binary_search(k).is_ok())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CompressionMode {
    Full,
    Slice(usize),
    LowRank(usize),
    Pruned(DimSelection),
}

impl fmt::Display for CompressionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressionMode::Full => write!(f, "full"),
            CompressionMode::Slice(k) => write!(f, "slice({k})"),
            CompressionMode::LowRank(k) => write!(f, "lowrank({k})"),
            CompressionMode::Pruned(s) => write!(f, "pruned({})", s.len()),
        }
    }
}

impl CompressionMode {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        match self {
            CompressionMode::Full => Ok(()),
            CompressionMode::Slice(k) | CompressionMode::LowRank(k) => {
                if *k == 0 || *k > embed_dim {
                    Err(Error::Config(format!("{self}: k must lie in [1, {embed_dim}]")))
                } else {
                    Ok(())
                }
            }
            CompressionMode::Pruned(sel) => {
                if sel.kept.last().is_some_and(|&l| l >= embed_dim) {
                    Err(Error::Config(format!("{self}: selection exceeds embed dim {embed_dim}")))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Length of the stored retrieval embedding.
    pub fn compressed_dim(&self, embed_dim: usize) -> usize {
        match self {
            CompressionMode::Full => embed_dim,
            CompressionMode::Slice(k) | CompressionMode::LowRank(k) => *k,
            CompressionMode::Pruned(sel) => sel.len(),
        }
    }

    /// Input width of the identity classifier. Low-rank feeds the re-expanded vector.
    pub fn classifier_dim(&self, embed_dim: usize) -> usize {
        match self {
            CompressionMode::LowRank(_) => embed_dim,
            other => other.compressed_dim(embed_dim),
        }
    }
}

/// Weights of the 2-layer MLP: `y = W2ᵀ·relu(W1ᵀx + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub w1: Matrix,
    pub b1: Vec<f32>,
    pub w2: Matrix,
    pub b2: Vec<f32>,
}

impl EncoderParams {
    pub fn zeros(feature_dim: usize, hidden: usize, embed_dim: usize) -> Self {
        Self {
            w1: Matrix::zeros(feature_dim, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, embed_dim),
            b2: vec![0.0; embed_dim],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub wc: Matrix,
    pub bc: Vec<f32>,
}

impl ClassifierParams {
    pub fn input_dim(&self) -> usize {
        self.wc.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.wc.cols()
    }
}

/// Down-projection `A` (D x k) and up-projection `B` (k x D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankHead {
    pub a: Matrix,
    pub b: Matrix,
}

impl LowRankHead {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        let (d, k) = a.shape();
        if b.shape() != (k, d) || k == 0 || k > d {
            return Err(Error::dim("LowRankHead::new", format!("A {d}x{k}"), format!("B {}x{}", b.rows(), b.cols())));
        }
        Ok(Self { a, b })
    }

    /// The head that reproduces slicing: `A` has the `k x k` identity on top and
    /// zeros below, `B` is its transpose.
    pub fn prefix_identity(embed_dim: usize, k: usize) -> Self {
        let mut a = Matrix::zeros(embed_dim, k);
        let mut b = Matrix::zeros(k, embed_dim);
        for i in 0..k {
            a.set(i, i, 1.0);
            b.set(i, i, 1.0);
        }
        Self { a, b }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.a.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
    pub head: Option<LowRankHead>,
}

impl ModelParams {
    /// Flat views of every tensor in checkpoint order: W1, b1, W2, b2, Wc, bc, A?, B?.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![
            self.encoder.w1.as_mut_slice(),
            &mut self.encoder.b1,
            self.encoder.w2.as_mut_slice(),
            &mut self.encoder.b2,
            self.classifier.wc.as_mut_slice(),
            &mut self.classifier.bc,
        ];
        if let Some(h) = &mut self.head {
            out.push(h.a.as_mut_slice());
            out.push(h.b.as_mut_slice());
        }
        out
    }

    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![
            self.encoder.w1.as_slice(),
            &self.encoder.b1,
            self.encoder.w2.as_slice(),
            &self.encoder.b2,
            self.classifier.wc.as_slice(),
            &self.classifier.bc,
        ];
        if let Some(h) = &self.head {
            out.push(h.a.as_slice());
            out.push(h.b.as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f32) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Matrix::new(rows, cols, data).expect("uniform draws are finite")
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// Uniform initialization in `±1/sqrt(fan_in)` for every layer, deterministic in `seed`.
pub fn init_params(
    feature_dim: usize,
    hidden: usize,
    embed_dim: usize,
    num_classes: usize,
    mode: &CompressionMode,
    seed: u64,
) -> Result<ModelParams> {
    if [feature_dim, hidden, embed_dim, num_classes].contains(&0) {
        return Err(Error::Config(format!(
            "model dims must be >= 1: F={feature_dim} H={hidden} D={embed_dim} C={num_classes}"
        )));
    }
    mode.validate(embed_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = |fan_in: usize| 1.0 / (fan_in as f32).sqrt();

    let encoder = EncoderParams {
        w1: uniform_matrix(&mut rng, feature_dim, hidden, bound(feature_dim)),
        b1: uniform_vec(&mut rng, hidden, bound(feature_dim)),
        w2: uniform_matrix(&mut rng, hidden, embed_dim, bound(hidden)),
        b2: uniform_vec(&mut rng, embed_dim, bound(hidden)),
    };
    let cls_in = mode.classifier_dim(embed_dim);
    let classifier = ClassifierParams {
        wc: uniform_matrix(&mut rng, cls_in, num_classes, bound(cls_in)),
        bc: uniform_vec(&mut rng, num_classes, bound(cls_in)),
    };
    let head = match mode {
        CompressionMode::LowRank(k) => Some(LowRankHead {
            a: uniform_matrix(&mut rng, embed_dim, *k, bound(embed_dim)),
            b: uniform_matrix(&mut rng, *k, embed_dim, bound(*k)),
        }),
        _ => None,
    };
    Ok(ModelParams {
        encoder,
        classifier,
        head,
    })
}

fn add_bias(v: &mut [f32], b: &[f32]) {
    v.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
}

/// Hidden pre-activation `W1ᵀx + b1`.
pub(crate) fn hidden_pre(p: &EncoderParams, x: &[f32]) -> Result<Vec<f32>> {
    let mut h = matvec_t(&p.w1, x).map_err(|_| Error::dim("encode", format!("F={}", p.feature_dim()), format!("input len {}", x.len())))?;
    add_bias(&mut h, &p.b1);
    Ok(h)
}

pub fn encode(p: &EncoderParams, x: &[f32]) -> Result<Vec<f32>> {
    let mut h = hidden_pre(p, x)?;
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut y = matvec_t(&p.w2, &h)?;
    add_bias(&mut y, &p.b2);
    Ok(y)
}

pub fn slice_embedding(y: &[f32], k: usize) -> Result<Vec<f32>> {
    if k == 0 || k > y.len() {
        return Err(Error::dim("slice_embedding", format!("k={k}"), format!("len {}", y.len())));
    }
    Ok(y[..k].to_vec())
}

pub fn select_dims(y: &[f32], sel: &DimSelection) -> Result<Vec<f32>> {
    if let Some(&last) = sel.kept.last() {
        if last >= y.len() {
            return Err(Error::dim("select_dims", format!("index {last}"), format!("len {}", y.len())));
        }
    }
    Ok(sel.kept.iter().map(|&i| y[i]).collect())
}

/// Compressed embedding `z = Aᵀy`.
pub fn low_rank_project(h: &LowRankHead, y: &[f32]) -> Result<Vec<f32>> {
    matvec_t(&h.a, y).map_err(|_| Error::dim("low_rank_project", format!("D={}", h.embed_dim()), format!("len {}", y.len())))
}

/// Re-expanded features `e = Bᵀz`, consumed only by the classifier.
pub fn low_rank_expand(h: &LowRankHead, z: &[f32]) -> Result<Vec<f32>> {
    matvec_t(&h.b, z).map_err(|_| Error::dim("low_rank_expand", format!("k={}", h.rank()), format!("len {}", z.len())))
}

pub fn classify(c: &ClassifierParams, e: &[f32]) -> Result<Vec<f32>> {
    let mut logits = matvec_t(&c.wc, e).map_err(|_| Error::dim("classify", format!("D_cls={}", c.input_dim()), format!("len {}", e.len())))?;
    add_bias(&mut logits, &c.bc);
    Ok(logits)
}

/// Applies a mode's reduction to an encoder output.
pub fn reduce_embedding(y: &[f32], head: Option<&LowRankHead>, mode: &CompressionMode) -> Result<Vec<f32>> {
    match (mode, head) {
        (CompressionMode::Full, None) => Ok(y.to_vec()),
        (CompressionMode::Slice(k), None) => slice_embedding(y, *k),
        (CompressionMode::Pruned(sel), None) => select_dims(y, sel),
        (CompressionMode::LowRank(k), Some(h)) if h.rank() == *k => low_rank_project(h, y),
        (CompressionMode::LowRank(k), Some(h)) => Err(Error::Config(format!(
            "mode lowrank({k}) but head has rank {}",
            h.rank()
        ))),
        (CompressionMode::LowRank(_), None) => Err(Error::Config("mode lowrank needs a low-rank head".into())),
        (m, Some(_)) => Err(Error::Config(format!("mode {m} does not take a low-rank head"))),
    }
}

/// The stored/compared embedding for one input. The classifier plays no part.
pub fn embed_for_retrieval(
    encoder: &EncoderParams,
    head: Option<&LowRankHead>,
    mode: &CompressionMode,
    x: &[f32],
) -> Result<Vec<f32>> {
    let y = encode(encoder, x)?;
    reduce_embedding(&y, head, mode)
}

/// Row-wise [`embed_for_retrieval`] over a feature matrix.
pub fn embed_matrix(
    encoder: &EncoderParams,
    head: Option<&LowRankHead>,
    mode: &CompressionMode,
    features: &Matrix,
) -> Result<Matrix> {
    let dim = mode.compressed_dim(encoder.embed_dim());
    let mut data = Vec::with_capacity(features.rows() * dim);
    for x in features.iter_rows() {
        data.extend(embed_for_retrieval(encoder, head, mode, x)?);
    }
    Matrix::new(features.rows(), dim, data)
}
