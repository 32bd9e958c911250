//! Synthetic multi-view identity data, query/gallery splits and triplet sampling.
//!
//! Each identity owns a latent code drawn from a unit Gaussian in an
//! `intrinsic_dim`-dimensional subspace. A fixed random orthonormal map embeds
//! that subspace into `feature_dim`, and every view adds isotropic Gaussian
//! noise of scale `view_noise` in the full feature space.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::store::{self, Payload};

/// Borrowed view of one sample.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub features: &'a [f32],
    pub identity: usize,
    pub view: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    identities: Vec<usize>,
    views: Vec<usize>,
    num_views: usize,
    by_identity: Vec<Vec<usize>>,
}

impl Dataset {
    /// Validates that identities are `0..n` with `n >= 2` and each has at least two samples.
    pub fn new(features: Matrix, identities: Vec<usize>, views: Vec<usize>) -> Result<Self> {
        if identities.len() != features.rows() || views.len() != features.rows() {
            return Err(Error::dim(
                "Dataset::new",
                format!("{} feature rows", features.rows()),
                format!("{} identities / {} views", identities.len(), views.len()),
            ));
        }
        let num_identities = identities.iter().max().map_or(0, |m| m + 1);
        if num_identities < 2 {
            return Err(Error::Config(format!(
                "dataset needs at least 2 identities, found {num_identities}"
            )));
        }
        let mut by_identity = vec![Vec::new(); num_identities];
        for (i, &id) in identities.iter().enumerate() {
            by_identity[id].push(i);
        }
        if let Some((id, members)) = by_identity.iter().enumerate().find(|(_, m)| m.len() < 2) {
            return Err(Error::Config(format!(
                "identity {id} has {} sample(s); every identity needs at least 2",
                members.len()
            )));
        }
        let num_views = views.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            features,
            identities,
            views,
            num_views,
            by_identity,
        })
    }

    /// Builds a dataset from labeled rows; views are numbered by order of appearance per label.
    pub fn from_labeled(features: Matrix, labels: &[u32]) -> Result<Self> {
        let identities: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let mut seen = vec![0usize; identities.iter().max().map_or(0, |m| m + 1)];
        let views = identities
            .iter()
            .map(|&id| {
                let v = seen[id];
                seen[id] += 1;
                v
            })
            .collect();
        Self::new(features, identities, views)
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.by_identity.len()
    }

    pub fn num_views(&self) -> usize {
        self.num_views
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn identities(&self) -> &[usize] {
        &self.identities
    }

    pub fn labels_u32(&self) -> Vec<u32> {
        self.identities.iter().map(|&i| i as u32).collect()
    }

    pub fn members(&self, identity: usize) -> &[usize] {
        &self.by_identity[identity]
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            features: self.features.row(i),
            identity: self.identities[i],
            view: self.views[i],
        }
    }

    /// Splits identities `0..n_first` from the rest, relabeling both halves from zero.
    pub fn partition_identities(&self, n_first: usize) -> Result<(Dataset, Dataset)> {
        let n = self.num_identities();
        if n_first < 2 || n - n_first.min(n) < 2 {
            return Err(Error::Config(format!(
                "cannot partition {n} identities at {n_first}: both sides need at least 2"
            )));
        }
        let part = |keep: &dyn Fn(usize) -> bool, offset: usize| {
            let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.identities[i])).collect();
            Dataset::new(
                self.features.select_rows(&idx),
                idx.iter().map(|&i| self.identities[i] - offset).collect(),
                idx.iter().map(|&i| self.views[i]).collect(),
            )
        };
        Ok((part(&|id| id < n_first, 0)?, part(&|id| id >= n_first, n_first)?))
    }

    /// Identity-disjoint train/eval partition using `holdout_fraction` of identities for evaluation.
    pub fn train_eval_split(&self, holdout_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "holdout fraction must lie in (0, 1), got {holdout_fraction}"
            )));
        }
        let n = self.num_identities();
        let n_eval = ((n as f64) * holdout_fraction).round() as usize;
        self.partition_identities(n - n_eval)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub views_per_identity: usize,
    pub feature_dim: usize,
    pub intrinsic_dim: usize,
    pub view_noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 200,
            views_per_identity: 10,
            feature_dim: 48,
            intrinsic_dim: 8,
            view_noise: 0.05,
            seed: 0,
        }
    }
}

/// Orthonormal `rows x cols` basis (columns orthonormal) via modified Gram-Schmidt.
fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    let SynthConfig {
        num_identities,
        views_per_identity,
        feature_dim,
        intrinsic_dim,
        view_noise,
        seed,
    } = *cfg;
    if num_identities < 2 {
        return Err(Error::Config("need at least 2 identities".into()));
    }
    if views_per_identity < 2 {
        return Err(Error::Config("need at least 2 views per identity".into()));
    }
    if intrinsic_dim == 0 || intrinsic_dim > feature_dim {
        return Err(Error::Config(format!(
            "intrinsic_dim must lie in [1, feature_dim={feature_dim}], got {intrinsic_dim}"
        )));
    }
    if !(view_noise >= 0.0 && view_noise.is_finite()) {
        return Err(Error::Config(format!("view_noise must be finite and >= 0, got {view_noise}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = random_orthonormal(&mut rng, feature_dim, intrinsic_dim);
    let n = num_identities * views_per_identity;
    let mut data = Vec::with_capacity(n * feature_dim);
    let mut identities = Vec::with_capacity(n);
    let mut views = Vec::with_capacity(n);
    let noise = f64::from(view_noise);
    for id in 0..num_identities {
        let code: Vec<f64> = (0..intrinsic_dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut base = vec![0.0f64; feature_dim];
        for (c, b) in code.iter().zip(&basis) {
            base.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
        for view in 0..views_per_identity {
            // Noise is drawn even at zero scale so every noise level shares one stream.
            data.extend(base.iter().map(|&x| {
                let z: f64 = rng.sample(StandardNormal);
                (x + noise * z) as f32
            }));
            identities.push(id);
            views.push(view);
        }
    }
    Dataset::new(Matrix::new(n, feature_dim, data)?, identities, views)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryGallerySplit {
    pub query_indices: Vec<usize>,
    pub gallery_indices: Vec<usize>,
}

pub fn split_query_gallery(ds: &Dataset, queries_per_identity: usize, seed: u64) -> Result<QueryGallerySplit> {
    if queries_per_identity == 0 {
        return Err(Error::Config("queries_per_identity must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut query_indices = Vec::new();
    let mut gallery_indices = Vec::new();
    for id in 0..ds.num_identities() {
        let mut members = ds.members(id).to_vec();
        if queries_per_identity >= members.len() {
            return Err(Error::Config(format!(
                "identity {id} has {} samples; cannot hold out {queries_per_identity} queries and keep a gallery entry",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        query_indices.extend_from_slice(&members[..queries_per_identity]);
        gallery_indices.extend_from_slice(&members[queries_per_identity..]);
    }
    query_indices.sort_unstable();
    gallery_indices.sort_unstable();
    Ok(QueryGallerySplit {
        query_indices,
        gallery_indices,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripletBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub anchor_labels: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Uniform anchors, uniform positives among the anchor's other samples and
/// uniform negatives among samples of other identities.
pub fn sample_triplets(ds: &Dataset, batch_size: usize, rng_state: u64) -> Result<TripletBatch> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_state);
    let n = ds.len();
    let mut batch = TripletBatch {
        anchors: Vec::with_capacity(batch_size),
        positives: Vec::with_capacity(batch_size),
        negatives: Vec::with_capacity(batch_size),
        anchor_labels: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let a = rng.random_range(0..n);
        let id = ds.identities[a];
        let members = ds.members(id);
        let p = loop {
            let p = members[rng.random_range(0..members.len())];
            if p != a {
                break p;
            }
        };
        let neg = loop {
            let cand = rng.random_range(0..n);
            if ds.identities[cand] != id {
                break cand;
            }
        };
        batch.anchors.push(a);
        batch.positives.push(p);
        batch.negatives.push(neg);
        batch.anchor_labels.push(id);
    }
    Ok(batch)
}

/// Reads an f32 embedding store with its label block.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(Matrix, Vec<u32>)> {
    match store::read_store(path)? {
        (Payload::F32(m), Some(labels)) => Ok((m, labels)),
        (Payload::F32(m), None) if m.rows() == 0 => Ok((m, Vec::new())),
        (Payload::F32(_), None) => Err(Error::Format {
            field: "labels",
            offset: 6,
            detail: "store has no label block".into(),
        }),
        (Payload::I8(_), _) => Err(Error::Format {
            field: "dtype",
            offset: 5,
            detail: "expected an f32 store".into(),
        }),
    }
}
