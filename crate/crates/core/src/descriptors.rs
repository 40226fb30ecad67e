//! Content descriptors: the words that name each bottleneck concept.
//!
//! For an image cluster, the candidate pool is the union of its topics'
//! representations. Candidates are ranked by cosine alignment with the
//! cluster centroid and the ten best form the descriptor, which drops tags
//! that do not match the cluster's visual content.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{TextTable, Vocabulary};
use crate::cluster::Cluster;
use crate::linalg;
use crate::topics::Topic;

pub const DESCRIPTOR_SIZE: usize = 10;

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("word {0:?} is not in the vocabulary")]
    WordNotInVocabulary(String),
    #[error("cluster {0} has no candidate words")]
    EmptyCandidatePool(usize),
    #[error("descriptor for {0} has a zero-norm embedding")]
    ZeroNormEmbedding(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorOrigin {
    /// Image cluster, words filtered by centroid alignment.
    ImageCluster,
    /// Text topic over the whole tag corpus, words as ranked by c-TF-IDF.
    GlobalTopic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    MeanOfWords,
    Phrase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    /// Source cluster id (or topic id for global topics).
    pub cluster_id: usize,
    pub name: String,
    pub words: Vec<String>,
    /// Centroid alignment of each word, parallel to `words`; absent for global topics.
    pub r: Option<Vec<f64>>,
    #[serde(rename = "P_j")]
    pub privacy_score: Option<f64>,
    pub embedding: Vec<f64>,
    pub embedding_source: EmbeddingSource,
    pub origin: DescriptorOrigin,
}

impl Descriptor {
    /// Text keyed into phrase embedding tables.
    pub fn text(&self) -> String {
        phrase_text(&self.words)
    }
}

pub fn phrase_text(words: &[String]) -> String {
    words.join(", ")
}

/// Cosine between the cluster centroid and each candidate word.
pub fn alignment_scores<'a, I>(
    centroid: &[f64],
    candidates: I,
    vocab: &Vocabulary,
) -> Result<BTreeMap<String, f64>, DescriptorError>
where
    I: IntoIterator<Item = &'a String>,
{
    candidates
        .into_iter()
        .map(|w| {
            let e = vocab.get(w).ok_or_else(|| DescriptorError::WordNotInVocabulary(w.clone()))?;
            Ok((w.clone(), linalg::cosine(centroid, e).unwrap_or(0.0)))
        })
        .collect()
}

fn embed(
    id: usize,
    words: &[String],
    vocab: &Vocabulary,
    phrases: Option<&TextTable>,
) -> Result<(Vec<f64>, EmbeddingSource), DescriptorError> {
    if let Some(v) = phrases.and_then(|p| p.get(&phrase_text(words))) {
        let e = linalg::normalized(v).ok_or(DescriptorError::ZeroNormEmbedding(id))?;
        return Ok((e, EmbeddingSource::Phrase));
    }
    let rows = words
        .iter()
        .map(|w| vocab.get(w).ok_or_else(|| DescriptorError::WordNotInVocabulary(w.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let e = linalg::normalized_mean(rows, vocab.embeddings().dim()).ok_or(DescriptorError::ZeroNormEmbedding(id))?;
    Ok((e, EmbeddingSource::MeanOfWords))
}

/// Image-guided descriptor for one cluster.
pub fn build_descriptor(
    cluster: &Cluster,
    topics: &[Topic],
    vocab: &Vocabulary,
    phrases: Option<&TextTable>,
) -> Result<Descriptor, DescriptorError> {
    let pool: BTreeSet<&String> = topics.iter().flat_map(|t| t.representation.iter()).collect();
    if pool.is_empty() {
        return Err(DescriptorError::EmptyCandidatePool(cluster.id));
    }
    let r = alignment_scores(&cluster.centroid, pool, vocab)?;
    let mut ranked: Vec<(String, f64)> = r.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(DESCRIPTOR_SIZE);
    let (words, scores): (Vec<String>, Vec<f64>) = ranked.into_iter().unzip();
    let (embedding, embedding_source) = embed(cluster.id, &words, vocab, phrases)?;
    Ok(Descriptor {
        cluster_id: cluster.id,
        name: words[0].clone(),
        words,
        r: Some(scores),
        privacy_score: cluster.privacy_score,
        embedding,
        embedding_source,
        origin: DescriptorOrigin::ImageCluster,
    })
}

/// Descriptor straight from a corpus-wide topic, without image guidance.
pub fn topic_descriptor(
    topic: &Topic,
    privacy_score: Option<f64>,
    vocab: &Vocabulary,
    phrases: Option<&TextTable>,
) -> Result<Descriptor, DescriptorError> {
    if topic.representation.is_empty() {
        return Err(DescriptorError::EmptyCandidatePool(topic.id));
    }
    let words: Vec<String> = topic.representation.iter().take(DESCRIPTOR_SIZE).cloned().collect();
    let (embedding, embedding_source) = embed(topic.id, &words, vocab, phrases)?;
    Ok(Descriptor {
        cluster_id: topic.id,
        name: words[0].clone(),
        words,
        r: None,
        privacy_score,
        embedding,
        embedding_source,
        origin: DescriptorOrigin::GlobalTopic,
    })
}

/// Makes descriptor names unique and applies `overrides` (cluster id -> name).
/// Default names are the top word, suffixed with the cluster id on collision.
pub fn assign_names(descriptors: &mut [Descriptor], overrides: &BTreeMap<usize, String>) {
    let mut uses: HashMap<String, usize> = HashMap::new();
    for d in descriptors.iter() {
        if let Some(w) = d.words.first() {
            *uses.entry(w.clone()).or_insert(0) += 1;
        }
    }
    for d in descriptors.iter_mut() {
        d.name = match overrides.get(&d.cluster_id) {
            Some(n) => n.clone(),
            None => {
                let top = d.words.first().cloned().unwrap_or_default();
                if uses.get(&top).copied().unwrap_or(0) > 1 {
                    format!("{top}-{}", d.cluster_id)
                } else {
                    top
                }
            }
        };
    }
}
