//! Euclidean gallery ranking and retrieval metrics (mAP, rank-k).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, QueryGallerySplit};
use crate::error::{Error, Result};
use crate::model::{embed_matrix, CompressionMode, EncoderParams, LowRankHead};
use crate::numerics::{euclidean_distance, Matrix};
use crate::store::{dequantize, quantize_uniform, quantize_with_scale, size_report};
use crate::training::TrainedModel;

/// Gallery indices in ascending distance from one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub query_index: usize,
    pub order: Vec<usize>,
    pub distances: Vec<f32>,
}

/// Sorts the gallery by distance to `query`; equal distances keep gallery order.
pub fn rank_gallery(query: &[f32], gallery: &Matrix) -> Result<Ranking> {
    if gallery.rows() == 0 {
        return Err(Error::Argument("cannot rank against an empty gallery".into()));
    }
    if gallery.cols() != query.len() {
        return Err(Error::dim("rank_gallery", format!("query len {}", query.len()), format!("gallery dim {}", gallery.cols())));
    }
    let dist: Vec<f32> = gallery
        .iter_rows()
        .map(|g| euclidean_distance(query, g))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let distances = order.iter().map(|&i| dist[i]).collect();
    Ok(Ranking {
        query_index: 0,
        order,
        distances,
    })
}

/// Average precision of one ranked list; `None` when no gallery item is relevant.
pub fn average_precision<L: PartialEq>(ranking: &Ranking, query_label: &L, gallery_labels: &[L]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, &g) in ranking.order.iter().enumerate() {
        if gallery_labels[g] == *query_label {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Metrics over retained queries; queries without a relevant gallery item are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub num_queries: usize,
    pub dropped_queries: usize,
}

struct QueryResult {
    ap: f64,
    first_hit: usize,
}

fn score_queries<L: PartialEq + Sync>(
    queries: &Matrix,
    query_labels: &[L],
    gallery: &Matrix,
    gallery_labels: &[L],
) -> Result<Vec<Option<QueryResult>>> {
    if queries.rows() != query_labels.len() || gallery.rows() != gallery_labels.len() {
        return Err(Error::dim(
            "retrieval labels",
            format!("{} queries / {} labels", queries.rows(), query_labels.len()),
            format!("{} gallery / {} labels", gallery.rows(), gallery_labels.len()),
        ));
    }
    (0..queries.rows())
        .into_par_iter()
        .map(|i| {
            let mut r = rank_gallery(queries.row(i), gallery)?;
            r.query_index = i;
            let ql = &query_labels[i];
            Ok(average_precision(&r, ql, gallery_labels).map(|ap| QueryResult {
                ap,
                first_hit: r.order.iter().position(|&g| gallery_labels[g] == *ql).expect("AP implies a hit"),
            }))
        })
        .collect()
}

fn rank_rate(results: &[&QueryResult], k: usize) -> f64 {
    results.iter().filter(|r| r.first_hit < k).count() as f64 / results.len() as f64
}

pub fn retrieval_metrics<L: PartialEq + Sync>(
    queries: &Matrix,
    query_labels: &[L],
    gallery: &Matrix,
    gallery_labels: &[L],
) -> Result<RetrievalMetrics> {
    let scored = score_queries(queries, query_labels, gallery, gallery_labels)?;
    let kept: Vec<&QueryResult> = scored.iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::Evaluation("no query has a relevant gallery item".into()));
    }
    // fixed-order sum keeps the result independent of thread scheduling
    let map = kept.iter().map(|r| r.ap).sum::<f64>() / kept.len() as f64;
    Ok(RetrievalMetrics {
        map,
        rank1: rank_rate(&kept, 1),
        rank5: rank_rate(&kept, 5),
        num_queries: kept.len(),
        dropped_queries: scored.len() - kept.len(),
    })
}

pub fn mean_average_precision<L: PartialEq + Sync>(
    queries: &Matrix,
    query_labels: &[L],
    gallery: &Matrix,
    gallery_labels: &[L],
) -> Result<f64> {
    Ok(retrieval_metrics(queries, query_labels, gallery, gallery_labels)?.map)
}

/// Fraction of retained queries with a relevant item among the top `k`.
pub fn rank_k_accuracy<L: PartialEq + Sync>(
    queries: &Matrix,
    query_labels: &[L],
    gallery: &Matrix,
    gallery_labels: &[L],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("k must be >= 1".into()));
    }
    let scored = score_queries(queries, query_labels, gallery, gallery_labels)?;
    let kept: Vec<&QueryResult> = scored.iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::Evaluation("no query has a relevant gallery item".into()));
    }
    Ok(rank_rate(&kept, k))
}

/// One evaluated configuration.
///
/// CSV column order: `dim,bits,ratio,mAP,rank1,rank5,num_queries,dropped_queries`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub compressed_dim: usize,
    pub bits: usize,
    pub ratio: f64,
    pub num_queries: usize,
    pub dropped_queries: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "dim,bits,ratio,mAP,rank1,rank5,num_queries,dropped_queries";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.6},{:.6},{:.6},{},{}",
            self.compressed_dim,
            self.bits,
            self.ratio,
            self.map,
            self.rank1,
            self.rank5,
            self.num_queries,
            self.dropped_queries
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Metric equality, ignoring size bookkeeping.
    pub fn same_metrics(&self, other: &EvalReport) -> bool {
        self.map == other.map
            && self.rank1 == other.rank1
            && self.rank5 == other.rank5
            && self.num_queries == other.num_queries
    }
}

/// Scores already-computed embeddings. With `quantize_storage`, queries and
/// gallery both go through int8 codes at `storage_scale`, or at a scale
/// calibrated on the gallery when none is given.
pub fn evaluate_embeddings<L: PartialEq + Sync>(
    queries: &Matrix,
    query_labels: &[L],
    gallery: &Matrix,
    gallery_labels: &[L],
    original_dim: usize,
    quantize_storage: bool,
    storage_scale: Option<f32>,
) -> Result<EvalReport> {
    let dim = gallery.cols();
    let (q, g, bits) = if quantize_storage {
        let gq = match storage_scale {
            Some(s) => quantize_with_scale(gallery, s)?,
            None => quantize_uniform(gallery)?,
        };
        let qq = quantize_with_scale(queries, gq.scale())?;
        (dequantize(&qq), dequantize(&gq), 8)
    } else {
        (queries.clone(), gallery.clone(), 32)
    };
    let m = retrieval_metrics(&q, query_labels, &g, gallery_labels)?;
    let size = size_report(original_dim, 32, dim, bits)?;
    Ok(EvalReport {
        map: m.map,
        rank1: m.rank1,
        rank5: m.rank5,
        compressed_dim: dim,
        bits,
        ratio: size.ratio,
        num_queries: m.num_queries,
        dropped_queries: m.dropped_queries,
    })
}

/// The pieces of a model needed to produce retrieval embeddings.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalModel<'a> {
    pub encoder: &'a EncoderParams,
    pub head: Option<&'a LowRankHead>,
    /// Frozen QAT scale, reused for storage quantization when present.
    pub storage_scale: Option<f32>,
}

impl TrainedModel {
    pub fn retrieval(&self) -> RetrievalModel<'_> {
        RetrievalModel {
            encoder: &self.params.encoder,
            head: self.params.head.as_ref(),
            storage_scale: self.qat.map(|q| q.scale()),
        }
    }
}

pub fn evaluate_config(
    model: RetrievalModel<'_>,
    split: &QueryGallerySplit,
    ds: &Dataset,
    mode: &CompressionMode,
    quantize_storage: bool,
) -> Result<EvalReport> {
    let embed = |idx: &[usize]| embed_matrix(model.encoder, model.head, mode, &ds.features().select_rows(idx));
    let queries = embed(&split.query_indices)?;
    let gallery = embed(&split.gallery_indices)?;
    let labels = |idx: &[usize]| idx.iter().map(|&i| ds.identities()[i]).collect::<Vec<_>>();
    evaluate_embeddings(
        &queries,
        &labels(&split.query_indices),
        &gallery,
        &labels(&split.gallery_indices),
        model.encoder.embed_dim(),
        quantize_storage,
        model.storage_scale,
    )
}
