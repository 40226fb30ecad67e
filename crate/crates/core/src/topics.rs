//! Topic discovery over tag documents and class-based TF-IDF word scoring.
//!
//! A tag document is the tag list of one image, embedded as the normalized
//! mean of its word vectors. Documents are clustered with HDBSCAN; each text
//! cluster is a topic whose words are scored with c-TF-IDF
//! `h(w, t) = f(w, t) * ln(1 + a / f(w))`, where `f(w, t)` is the L1-normalized
//! count of `w` in `t`, `f(w)` the raw count of `w` over all topics and `a` the
//! average number of word occurrences per topic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{EmbeddingMatrix, Vocabulary};
use crate::cluster::{hdbscan, ClusterConfig, ClusterError};
use crate::linalg;
use crate::reduce::Pca;

/// Words per topic representation.
pub const REPRESENTATION_SIZE: usize = 10;
/// Document count from which documents are reduced before clustering.
pub const REDUCE_DOCS_FROM: usize = 200;
pub const DOC_REDUCED_DIM: usize = 5;

#[derive(Debug, Error)]
pub enum TopicError {
    #[error("topic {0} has no word occurrences")]
    EmptyTopic(usize),
    #[error("no topics given")]
    NoTopics,
    #[error("need at least {needed} documents, got {docs}")]
    TooFewDocuments { docs: usize, needed: usize },
    #[error("word {0:?} is not in the vocabulary")]
    WordNotInVocabulary(String),
    #[error("min_topic_size must be at least 2")]
    InvalidConfig,
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TopicScope {
    /// Topics inside each image cluster (image-guided).
    #[default]
    PerCluster,
    /// Topics over the whole tag corpus.
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopicConfig {
    pub min_topic_size: usize,
    #[serde(default)]
    pub scope: TopicScope,
}

impl Default for TopicConfig {
    fn default() -> Self {
        TopicConfig {
            min_topic_size: 10,
            scope: TopicScope::PerCluster,
        }
    }
}

/// Tag hygiene: single characters and purely numeric tokens carry no content.
pub fn keep_word(w: &str) -> bool {
    w.chars().count() >= 2 && !w.chars().all(|c| c.is_ascii_digit())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagDocument {
    pub image_id: String,
    pub words: Vec<String>,
    pub embedding: Vec<f64>,
}

impl TagDocument {
    /// Builds a document from raw tags; `None` when no tag survives hygiene.
    pub fn from_tags(image_id: &str, tags: &[String], vocab: &Vocabulary) -> Result<Option<Self>, TopicError> {
        let words: Vec<String> = tags.iter().filter(|t| keep_word(t)).cloned().collect();
        if words.is_empty() {
            return Ok(None);
        }
        let mut rows = Vec::with_capacity(words.len());
        for w in &words {
            rows.push(vocab.get(w).ok_or_else(|| TopicError::WordNotInVocabulary(w.clone()))?);
        }
        let dim = vocab.embeddings().dim();
        Ok(linalg::normalized_mean(rows, dim).map(|embedding| TagDocument {
            image_id: image_id.to_string(),
            words,
            embedding,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub id: usize,
    pub member_docs: Vec<String>,
    pub word_scores: BTreeMap<String, f64>,
    pub representation: Vec<String>,
}

/// c-TF-IDF scores, one map per input topic. Words absent from a topic score 0
/// and are left out of its map.
pub fn ctfidf(topic_word_counts: &[BTreeMap<String, u64>]) -> Result<Vec<BTreeMap<String, f64>>, TopicError> {
    if topic_word_counts.is_empty() {
        return Err(TopicError::NoTopics);
    }
    let mut word_total: BTreeMap<&str, u64> = BTreeMap::new();
    let mut totals = Vec::with_capacity(topic_word_counts.len());
    for (t, counts) in topic_word_counts.iter().enumerate() {
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(TopicError::EmptyTopic(t));
        }
        totals.push(total);
        for (w, &c) in counts {
            *word_total.entry(w).or_insert(0) += c;
        }
    }
    let all: u64 = totals.iter().sum();
    let n_topics = topic_word_counts.len() as u64;
    Ok(topic_word_counts
        .iter()
        .zip(&totals)
        .map(|(counts, &total)| {
            counts
                .iter()
                .filter(|(_, &c)| c > 0)
                .map(|(w, &c)| {
                    let tf = c as f64 / total as f64;
                    // a / f_w as one division of exact integers, so scaling every
                    // count by k leaves the score bit-identical
                    let ratio = all as f64 / (n_topics * word_total[w.as_str()]) as f64;
                    (w.clone(), tf * ratio.ln_1p())
                })
                .collect()
        })
        .collect())
}

/// Top words by descending score, ties by ascending word, zero scores dropped.
pub fn representation(scores: &BTreeMap<String, f64>, size: usize) -> Vec<String> {
    let mut ranked: Vec<(&String, f64)> = scores.iter().filter(|(_, &h)| h > 0.0).map(|(w, &h)| (w, h)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(size).map(|(w, _)| w.clone()).collect()
}

fn word_counts<'a, I: IntoIterator<Item = &'a TagDocument>>(docs: I) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for d in docs {
        for w in &d.words {
            *counts.entry(w.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Groups documents into topics and scores each topic's words.
///
/// Documents are clustered with HDBSCAN (`min_cluster_size = min_topic_size`)
/// on their joint-space embeddings, reduced to five dimensions from
/// [`REDUCE_DOCS_FROM`] documents on. Outlier documents join no topic. When
/// the documents form a single density mode, all of them form one topic.
pub fn discover_topics(docs: &[TagDocument], cfg: &TopicConfig) -> Result<Vec<Topic>, TopicError> {
    if cfg.min_topic_size < 2 {
        return Err(TopicError::InvalidConfig);
    }
    if docs.len() < cfg.min_topic_size {
        return Err(TopicError::TooFewDocuments {
            docs: docs.len(),
            needed: cfg.min_topic_size,
        });
    }
    let rows: Vec<Vec<f64>> = docs.iter().map(|d| d.embedding.clone()).collect();
    let ids = docs.iter().map(|d| d.image_id.clone()).collect();
    let mut points = EmbeddingMatrix::from_rows(rows, ids).map_err(|_| TopicError::NoTopics)?;
    if docs.len() >= REDUCE_DOCS_FROM && points.dim() > DOC_REDUCED_DIM {
        if let Ok(pca) = Pca::fit(&points, DOC_REDUCED_DIM) {
            points = pca.transform(&points);
        }
    }
    let assignment = hdbscan(&points, &ClusterConfig::new(cfg.min_topic_size))?;

    let groups: Vec<Vec<&TagDocument>> = if assignment.n_clusters <= 1 {
        vec![docs.iter().collect()]
    } else {
        let mut g = vec![Vec::new(); assignment.n_clusters];
        for (d, &l) in docs.iter().zip(&assignment.labels) {
            if l >= 0 {
                g[l as usize].push(d);
            }
        }
        g
    };
    let counts: Vec<BTreeMap<String, u64>> = groups.iter().map(|g| word_counts(g.iter().copied())).collect();
    let scores = ctfidf(&counts)?;
    Ok(groups
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(id, (members, word_scores))| Topic {
            id,
            member_docs: members.iter().map(|d| d.image_id.clone()).collect(),
            representation: representation(&word_scores, REPRESENTATION_SIZE),
            word_scores,
        })
        .collect())
}
