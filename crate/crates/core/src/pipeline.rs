//! End-to-end pipeline: reduce, cluster, topics, descriptors, train,
//! evaluate, explain. Each stage consumes only the artifacts of earlier
//! stages, so any stage can be re-run on its own from an output directory.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bundle::{format, Bundle, BundleError, EmbeddingMatrix, Label, Split};
use crate::cluster::{self, Cluster, ClusterConfig, ClusterError};
use crate::descriptors::{self, Descriptor, DescriptorError};
use crate::explain::{self, ExplainError, GlobalExplanation, LocalExplanation};
use crate::privnet::{self, AssociationMatrix, LinearModel, Metrics, PrivnetError, TrainConfig};
use crate::reduce::{self, ReduceError, ReducerConfig};
use crate::topics::{self, TagDocument, Topic, TopicConfig, TopicError, TopicScope};

pub const REDUCED_ARTIFACT: &str = "reduced.bin";
pub const CLUSTERS_ARTIFACT: &str = "clusters.json";
pub const TOPICS_ARTIFACT: &str = "topics.json";
pub const DESCRIPTORS_ARTIFACT: &str = "descriptors.json";
pub const MODEL_ARTIFACT: &str = "model.json";
pub const METRICS_ARTIFACT: &str = "metrics.json";
pub const EXPLANATIONS_ARTIFACT: &str = "explanations.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Class names in label index order.
pub fn class_names() -> Vec<String> {
    vec!["public".to_string(), "private".to_string()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Reduce,
    Cluster,
    Topics,
    Descriptors,
    Train,
    Eval,
    Explain,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Reduce => "reduce",
            Stage::Cluster => "cluster",
            Stage::Topics => "topics",
            Stage::Descriptors => "descriptors",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Explain => "explain",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Reduce(#[from] ReduceError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Privnet(#[from] PrivnetError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error("no {0} rows in the bundle")]
    NoRows(&'static str),
    #[error("no descriptor could be built")]
    NoDescriptors,
    #[error("artifact {name}: {message}")]
    Artifact { name: String, message: String },
    #[error("image {0} is not in the bundle")]
    UnknownImage(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

trait InStage<T> {
    fn in_stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> InStage<T> for Result<T, E> {
    fn in_stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage,
            source: e.into(),
        })
    }
}

/// Training hyper-parameters; the seed comes from [`PipelineConfig::seed`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            epochs: t.epochs,
            lr: t.lr,
            batch: t.batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub reducer: ReducerConfig,
    pub cluster: ClusterConfig,
    pub topics: TopicConfig,
    pub train: TrainSettings,
    pub seed: u64,
    pub top_k: usize,
    /// Display names for descriptors, keyed by cluster id.
    pub name_overrides: BTreeMap<usize, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            reducer: ReducerConfig::default(),
            cluster: ClusterConfig::default(),
            topics: TopicConfig::default(),
            train: TrainSettings::default(),
            seed: 0,
            top_k: explain::DEFAULT_TOP_K,
            name_overrides: BTreeMap::new(),
        }
    }
}

impl PipelineConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            lr: self.train.lr,
            batch: self.train.batch,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersArtifact {
    /// Ids of the clustered images, in clustering order.
    pub clustered_ids: Vec<String>,
    pub labels: Vec<i32>,
    pub n_clusters: usize,
    pub outliers: usize,
    pub silhouette: Option<f64>,
    pub dbcv: Option<f64>,
    pub config: ClusterConfig,
    pub clusters: Vec<Cluster>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicGroup {
    /// Source image cluster; absent for corpus-wide topics.
    pub cluster_id: Option<usize>,
    pub topics: Vec<Topic>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicsArtifact {
    pub scope: TopicScope,
    pub min_topic_size: usize,
    pub reduce_docs_from: usize,
    pub doc_reduced_dim: usize,
    pub groups: Vec<TopicGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub truth: String,
    pub predicted: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsArtifact {
    pub scope: TopicScope,
    pub n_descriptors: usize,
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationsArtifact {
    pub global: GlobalExplanation,
    pub local: Vec<LocalExplanation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub artifact: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: PipelineConfig,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub reduced: EmbeddingMatrix,
    pub clusters: ClustersArtifact,
    pub topics: TopicsArtifact,
    pub descriptors: Vec<Descriptor>,
    pub model: LinearModel,
    pub metrics: MetricsArtifact,
    pub explanations: ExplanationsArtifact,
    pub manifest: Manifest,
}

fn labeled(bundle: &Bundle, rows: &[usize]) -> (Vec<usize>, Vec<Option<usize>>) {
    let keep: Vec<usize> = rows.iter().copied().filter(|&r| bundle.records[r].label.is_some()).collect();
    let labels = keep.iter().map(|&r| bundle.records[r].label.map(Label::index)).collect();
    (keep, labels)
}

/// Rows used for clustering and topic discovery: train and val, or train
/// alone when the bundle has no val split.
pub fn discovery_rows(bundle: &Bundle) -> Result<Vec<usize>, StageError> {
    if bundle.indices_in(&[Split::Train]).is_empty() {
        return Err(StageError::NoRows("train"));
    }
    if bundle.indices_in(&[Split::Val]).is_empty() {
        log::warn!("bundle has no val split; clustering on train rows only");
    }
    Ok(bundle.indices_in(&[Split::Train, Split::Val]))
}

/// Reduced joint-space embeddings for every image, stored at `f32` precision
/// so the in-memory result equals the written artifact.
pub fn stage_reduce(bundle: &Bundle, cfg: &PipelineConfig) -> Result<EmbeddingMatrix, StageError> {
    let r = reduce::fit_reduce(&bundle.image_embeddings, &cfg.reducer, cfg.seed, bundle.reduced.as_ref())?;
    let data = r.data().iter().map(|&x| x as f32 as f64).collect();
    Ok(EmbeddingMatrix::new(r.dim(), data, r.row_ids().to_vec())?)
}

pub fn stage_cluster(bundle: &Bundle, reduced: &EmbeddingMatrix, cfg: &ClusterConfig) -> Result<ClustersArtifact, StageError> {
    let rows = discovery_rows(bundle)?;
    let points = reduced.select(&rows);
    let assignment = cluster::hdbscan(&points, cfg)?;
    let silhouette = cluster::silhouette(&points, &assignment).ok();
    let dbcv = cluster::dbcv(&points, &assignment).ok();
    let clusters = cluster::make_clusters(&assignment, bundle, &rows)?;
    log::info!(
        "{} clusters, {} outliers over {} images",
        assignment.n_clusters,
        assignment.outliers(),
        rows.len()
    );
    Ok(ClustersArtifact {
        clustered_ids: rows.iter().map(|&r| bundle.records[r].id.clone()).collect(),
        outliers: assignment.outliers(),
        n_clusters: assignment.n_clusters,
        labels: assignment.labels,
        silhouette,
        dbcv,
        config: cfg.clone(),
        clusters,
    })
}

fn id_index(bundle: &Bundle) -> HashMap<&str, usize> {
    bundle.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect()
}

fn documents(bundle: &Bundle, rows: &[usize]) -> Result<Vec<TagDocument>, TopicError> {
    let mut docs = Vec::with_capacity(rows.len());
    for &r in rows {
        let rec = &bundle.records[r];
        if let Some(d) = TagDocument::from_tags(&rec.id, &rec.tags, &bundle.vocabulary)? {
            docs.push(d);
        }
    }
    Ok(docs)
}

fn rows_of(bundle: &Bundle, ids: &[String]) -> Result<Vec<usize>, StageError> {
    let index = id_index(bundle);
    ids.iter()
        .map(|id| index.get(id.as_str()).copied().ok_or_else(|| StageError::UnknownImage(id.clone())))
        .collect()
}

/// Per-cluster topics (image-guided) or corpus-wide topics, per `cfg.scope`.
pub fn stage_topics(bundle: &Bundle, clusters: &ClustersArtifact, cfg: &TopicConfig) -> Result<TopicsArtifact, StageError> {
    let groups = match cfg.scope {
        TopicScope::Global => {
            let docs = documents(bundle, &discovery_rows(bundle)?)?;
            vec![TopicGroup {
                cluster_id: None,
                topics: topics::discover_topics(&docs, cfg)?,
            }]
        }
        TopicScope::PerCluster => clusters
            .clusters
            .par_iter()
            .map(|c| {
                let docs = documents(bundle, &rows_of(bundle, &c.member_ids)?)?;
                if docs.len() < 2 {
                    log::warn!("cluster {} has fewer than two tag documents; no topics", c.id);
                    return Ok(TopicGroup {
                        cluster_id: Some(c.id),
                        topics: Vec::new(),
                    });
                }
                // a cluster smaller than t_min still forms (at least) one topic
                let local = TopicConfig {
                    min_topic_size: cfg.min_topic_size.min(docs.len()),
                    scope: cfg.scope,
                };
                Ok(TopicGroup {
                    cluster_id: Some(c.id),
                    topics: topics::discover_topics(&docs, &local)?,
                })
            })
            .collect::<Result<Vec<_>, StageError>>()?,
    };
    Ok(TopicsArtifact {
        scope: cfg.scope,
        min_topic_size: cfg.min_topic_size,
        reduce_docs_from: topics::REDUCE_DOCS_FROM,
        doc_reduced_dim: topics::DOC_REDUCED_DIM,
        groups,
    })
}

pub fn stage_descriptors(
    bundle: &Bundle,
    clusters: &ClustersArtifact,
    topics: &TopicsArtifact,
    name_overrides: &BTreeMap<usize, String>,
) -> Result<Vec<Descriptor>, StageError> {
    let phrases = bundle.phrases.as_ref();
    let mut out = Vec::new();
    match topics.scope {
        TopicScope::PerCluster => {
            for group in &topics.groups {
                let Some(cid) = group.cluster_id else { continue };
                let cluster = clusters
                    .clusters
                    .iter()
                    .find(|c| c.id == cid)
                    .ok_or_else(|| StageError::Artifact {
                        name: TOPICS_ARTIFACT.into(),
                        message: format!("cluster {cid} is not in {CLUSTERS_ARTIFACT}"),
                    })?;
                match descriptors::build_descriptor(cluster, &group.topics, &bundle.vocabulary, phrases) {
                    Ok(d) => out.push(d),
                    Err(DescriptorError::EmptyCandidatePool(id)) => {
                        log::warn!("cluster {id} yields no descriptor; skipped");
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        TopicScope::Global => {
            let index = id_index(bundle);
            for topic in topics.groups.iter().flat_map(|g| &g.topics) {
                let p = cluster::privacy_score(
                    topic
                        .member_docs
                        .iter()
                        .filter_map(|id| index.get(id.as_str()).map(|&r| bundle.records[r].label)),
                );
                match descriptors::topic_descriptor(topic, p, &bundle.vocabulary, phrases) {
                    Ok(d) => out.push(d),
                    Err(DescriptorError::EmptyCandidatePool(id)) => log::warn!("topic {id} has no words; skipped"),
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }
    if out.is_empty() {
        return Err(StageError::NoDescriptors);
    }
    descriptors::assign_names(&mut out, name_overrides);
    Ok(out)
}

/// Trains on labeled train rows only; val rows (if any) give a reported loss.
pub fn stage_train(bundle: &Bundle, descriptors: &[Descriptor], cfg: &TrainConfig) -> Result<LinearModel, StageError> {
    let (train_rows, train_labels) = labeled(bundle, &bundle.indices_in(&[Split::Train]));
    if train_rows.is_empty() {
        return Err(StageError::NoRows("labeled train"));
    }
    let s = privnet::association_matrix(bundle, &train_rows, descriptors)?;
    let mut model = privnet::train(&s, &train_labels, class_names(), descriptors.to_vec(), cfg)?;
    let (val_rows, val_labels) = labeled(bundle, &bundle.indices_in(&[Split::Val]));
    if !val_rows.is_empty() {
        let sv = privnet::association_matrix(bundle, &val_rows, descriptors)?;
        model.train_meta.final_val_loss = Some(privnet::mean_loss(&model, &sv, &val_labels)?);
    }
    Ok(model)
}

fn test_matrix(bundle: &Bundle, model: &LinearModel) -> Result<(AssociationMatrix, Vec<Option<usize>>), StageError> {
    let (rows, labels) = labeled(bundle, &bundle.indices_in(&[Split::Test]));
    if rows.is_empty() {
        return Err(StageError::NoRows("labeled test"));
    }
    Ok((privnet::association_matrix(bundle, &rows, &model.descriptors)?, labels))
}

pub fn stage_eval(bundle: &Bundle, model: &LinearModel, scope: TopicScope) -> Result<MetricsArtifact, StageError> {
    let (s, labels) = test_matrix(bundle, model)?;
    let metrics = privnet::evaluate(model, &s, &labels)?;
    let predicted = model.predict_all(&s)?;
    let predictions = s
        .image_ids
        .iter()
        .zip(&labels)
        .zip(predicted)
        .map(|((id, t), p)| Prediction {
            image_id: id.clone(),
            truth: model.class_names[t.expect("labeled row")].clone(),
            predicted: model.class_names[p].clone(),
        })
        .collect();
    Ok(MetricsArtifact {
        scope,
        n_descriptors: model.n_descriptors(),
        metrics,
        predictions,
    })
}

/// Recomputes metrics from stored predictions (class names as written by eval).
pub fn metrics_from_stored(predictions: &[Prediction], class_names: &[String]) -> Result<Metrics, StageError> {
    let index = |name: &str| {
        class_names.iter().position(|c| c == name).ok_or_else(|| StageError::Artifact {
            name: "predictions".into(),
            message: format!("unknown class {name:?}"),
        })
    };
    let truth = predictions.iter().map(|p| index(&p.truth)).collect::<Result<Vec<_>, _>>()?;
    let pred = predictions.iter().map(|p| index(&p.predicted)).collect::<Result<Vec<_>, _>>()?;
    Ok(privnet::metrics_from_predictions(&truth, &pred, class_names)?)
}

/// Global weights plus local explanations of every labeled test image.
pub fn stage_explain(bundle: &Bundle, model: &LinearModel, top_k: usize) -> Result<ExplanationsArtifact, StageError> {
    let (s, labels) = test_matrix(bundle, model)?;
    let local = (0..s.rows())
        .into_par_iter()
        .map(|i| {
            let mut e = explain::local_explanation(model, &s.image_ids[i], s.row(i), top_k)?;
            e.ground_truth = labels[i].map(|l| model.class_names[l].clone());
            Ok(e)
        })
        .collect::<Result<Vec<_>, ExplainError>>()?;
    Ok(ExplanationsArtifact {
        global: explain::global_explanation(model),
        local,
    })
}

/// Local explanation of one bundle image, whatever its split.
pub fn explain_image(bundle: &Bundle, model: &LinearModel, image_id: &str, top_k: usize) -> Result<LocalExplanation, StageError> {
    let row = *id_index(bundle)
        .get(image_id)
        .ok_or_else(|| StageError::UnknownImage(image_id.to_string()))?;
    let s = privnet::association_matrix(bundle, &[row], &model.descriptors)?;
    let mut e = explain::local_explanation(model, image_id, s.row(0), top_k)?;
    e.ground_truth = bundle.records[row].label.map(|l| model.class_names[l.index()].clone());
    Ok(e)
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s.into_bytes()
}

pub fn reduced_bytes(reduced: &EmbeddingMatrix) -> Vec<u8> {
    format::encode(reduced.count(), reduced.dim(), reduced.data())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_artifact(out: &Path, name: &str, bytes: &[u8]) -> Result<(), StageError> {
    fs::create_dir_all(out)?;
    fs::write(out.join(name), bytes)?;
    Ok(())
}

pub fn read_artifact<T: DeserializeOwned>(out: &Path, name: &str) -> Result<T, StageError> {
    let path = out.join(name);
    let text = fs::read_to_string(&path).map_err(|e| StageError::Artifact {
        name: name.into(),
        message: format!("{}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| StageError::Artifact {
        name: name.into(),
        message: e.to_string(),
    })
}

/// Loads a reduced matrix artifact, rows in bundle order.
pub fn read_reduced(out: &Path, bundle: &Bundle) -> Result<EmbeddingMatrix, StageError> {
    let raw = format::read(&out.join(REDUCED_ARTIFACT))?;
    let ids: Vec<String> = bundle.records.iter().map(|r| r.id.clone()).collect();
    if raw.count != ids.len() {
        return Err(StageError::Artifact {
            name: REDUCED_ARTIFACT.into(),
            message: format!("{} rows for {} images", raw.count, ids.len()),
        });
    }
    Ok(EmbeddingMatrix::new(raw.dim, raw.data, ids)?)
}

/// Runs every stage in order. With `out`, each artifact and the manifest are
/// written there; checksums are computed either way.
pub fn run_pipeline(bundle: &Bundle, cfg: &PipelineConfig, out: Option<&Path>) -> Result<PipelineOutput, PipelineError> {
    let mut stages = Vec::new();
    let mut emit = |stage: Stage, name: &str, bytes: Vec<u8>| -> Result<(), PipelineError> {
        stages.push(StageRecord {
            stage,
            artifact: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        if let Some(dir) = out {
            write_artifact(dir, name, &bytes).in_stage(stage)?;
        }
        Ok(())
    };

    let reduced = stage_reduce(bundle, cfg).in_stage(Stage::Reduce)?;
    emit(Stage::Reduce, REDUCED_ARTIFACT, reduced_bytes(&reduced))?;

    let clusters = stage_cluster(bundle, &reduced, &cfg.cluster).in_stage(Stage::Cluster)?;
    emit(Stage::Cluster, CLUSTERS_ARTIFACT, json_bytes(&clusters))?;

    let topics = stage_topics(bundle, &clusters, &cfg.topics).in_stage(Stage::Topics)?;
    emit(Stage::Topics, TOPICS_ARTIFACT, json_bytes(&topics))?;

    let descriptors =
        stage_descriptors(bundle, &clusters, &topics, &cfg.name_overrides).in_stage(Stage::Descriptors)?;
    emit(Stage::Descriptors, DESCRIPTORS_ARTIFACT, json_bytes(&descriptors))?;

    let model = stage_train(bundle, &descriptors, &cfg.train_config()).in_stage(Stage::Train)?;
    emit(Stage::Train, MODEL_ARTIFACT, json_bytes(&model))?;

    let metrics = stage_eval(bundle, &model, cfg.topics.scope).in_stage(Stage::Eval)?;
    emit(Stage::Eval, METRICS_ARTIFACT, json_bytes(&metrics))?;

    let explanations = stage_explain(bundle, &model, cfg.top_k).in_stage(Stage::Explain)?;
    emit(Stage::Explain, EXPLANATIONS_ARTIFACT, json_bytes(&explanations))?;

    let manifest = Manifest {
        config: cfg.clone(),
        seed: cfg.seed,
        stages,
    };
    if let Some(dir) = out {
        write_artifact(dir, MANIFEST_FILE, &json_bytes(&manifest)).in_stage(Stage::Explain)?;
    }
    Ok(PipelineOutput {
        reduced,
        clusters,
        topics,
        descriptors,
        model,
        metrics,
        explanations,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"seed": 3, "cluster": {"min_cluster_size": 12}}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.cluster.min_cluster_size, 12);
        assert_eq!(cfg.topics.min_topic_size, 10);
        assert_eq!(cfg.train.epochs, 100);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn stage_names() {
        assert_eq!(Stage::Descriptors.to_string(), "descriptors");
        assert_eq!(serde_json::to_string(&Stage::Eval).unwrap(), "\"eval\"");
    }
}
