#![allow(dead_code)]

use itm_core::descriptors::{Descriptor, DescriptorOrigin, EmbeddingSource};

/// Minimal descriptor with a unit embedding along axis `id % dim`.
pub fn descriptor(id: usize, dim: usize, p_j: Option<f64>) -> Descriptor {
    let mut embedding = vec![0.0; dim];
    embedding[id % dim] = 1.0;
    Descriptor {
        cluster_id: id,
        name: format!("concept{id}"),
        words: vec![format!("concept{id}")],
        r: None,
        privacy_score: p_j,
        embedding,
        embedding_source: EmbeddingSource::MeanOfWords,
        origin: DescriptorOrigin::ImageCluster,
    }
}

pub fn descriptors(n: usize) -> Vec<Descriptor> {
    (0..n).map(|i| descriptor(i, n.max(1), None)).collect()
}

pub fn class_names() -> Vec<String> {
    vec!["public".into(), "private".into()]
}
