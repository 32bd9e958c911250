//! Re-identification embedding compression.
//!
//! Trains a small encoder with triplet and identity-classifier losses on
//! synthetic multi-view data, compresses its embeddings by slicing, a learned
//! low-rank head, iterative structured pruning or int8 quantization-aware
//! training, and scores gallery retrieval (mAP, rank-k) against the
//! compression ratio.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod methods;
pub mod model;
pub mod numerics;
pub mod store;
pub mod training;

pub use error::{Error, Result};
pub use numerics::Matrix;
