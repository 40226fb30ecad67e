//! Image-guided topic modeling for interpretable classification.
//!
//! The pipeline clusters joint-space image embeddings, discovers tag topics
//! inside each cluster, filters topic words by their alignment with the
//! cluster centroid to form content descriptors, and trains a bias-free linear
//! classifier on image/descriptor cosine scores. Every prediction decomposes
//! exactly into per-descriptor contributions.

pub mod bundle;
pub mod linalg;
pub mod reduce;
pub mod cluster;
pub mod topics;
pub mod descriptors;
pub mod privnet;
pub mod explain;
pub mod pipeline;
pub mod ablation;
