//! Content categorization: density-based clustering of reduced image
//! embeddings, joint-space cluster centroids and cluster privacy scores.

mod hdbscan;
mod validity;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{Bundle, Label};
use crate::linalg;

pub use hdbscan::hdbscan;
pub use validity::{dbcv, silhouette};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least {needed} points, got {points}")]
    TooFewPoints { points: usize, needed: usize },
    #[error("at least two clusters are needed after outlier removal")]
    SingleCluster,
    #[error("no clusters to evaluate")]
    NoClusters,
    #[error("{points} points but {labels} labels")]
    LengthMismatch { points: usize, labels: usize },
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error("cluster {0} has a zero-norm centroid")]
    DegenerateCentroid(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[default]
    Eom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub min_cluster_size: usize,
    /// Neighbour count for core distances; defaults to `min_cluster_size`.
    #[serde(default)]
    pub min_samples: Option<usize>,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub selection: Selection,
}

impl ClusterConfig {
    pub fn new(min_cluster_size: usize) -> Self {
        ClusterConfig {
            min_cluster_size,
            min_samples: None,
            metric: Metric::Euclidean,
            selection: Selection::Eom,
        }
    }

    pub fn min_samples(&self) -> usize {
        self.min_samples.unwrap_or(self.min_cluster_size)
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.min_cluster_size < 2 {
            return Err(ClusterError::InvalidConfig("min_cluster_size must be at least 2".into()));
        }
        if self.min_samples == Some(0) {
            return Err(ClusterError::InvalidConfig("min_samples must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig::new(30)
    }
}

/// Per-point cluster labels; `-1` marks outliers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<i32>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    pub fn outliers(&self) -> usize {
        self.labels.iter().filter(|&&l| l < 0).count()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_clusters];
        for &l in self.labels.iter().filter(|&&l| l >= 0) {
            s[l as usize] += 1;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    pub member_ids: Vec<String>,
    /// Unit-norm mean of the members' joint-space embeddings.
    pub centroid: Vec<f64>,
    /// Percentage of labeled members that are private; `None` without labeled members.
    pub privacy_score: Option<f64>,
    pub name: String,
}

/// Share of private labels among labeled members, as a percentage.
pub fn privacy_score<I: IntoIterator<Item = Option<Label>>>(labels: I) -> Option<f64> {
    let (mut private, mut labeled) = (0usize, 0usize);
    for l in labels.into_iter().flatten() {
        labeled += 1;
        if l == Label::Private {
            private += 1;
        }
    }
    (labeled > 0).then(|| 100.0 * private as f64 / labeled as f64)
}

/// Builds clusters from an assignment over `rows` (bundle record indices, in
/// the order they were clustered).
pub fn make_clusters(
    assignment: &ClusterAssignment,
    bundle: &Bundle,
    rows: &[usize],
) -> Result<Vec<Cluster>, ClusterError> {
    if assignment.labels.len() != rows.len() {
        return Err(ClusterError::LengthMismatch {
            points: rows.len(),
            labels: assignment.labels.len(),
        });
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); assignment.n_clusters];
    for (&l, &row) in assignment.labels.iter().zip(rows) {
        if l >= 0 {
            groups[l as usize].push(row);
        }
    }
    let dim = bundle.dim();
    groups
        .into_iter()
        .enumerate()
        .map(|(id, members)| {
            let centroid = linalg::normalized_mean(members.iter().map(|&r| bundle.image_embeddings.row(r)), dim)
                .ok_or(ClusterError::DegenerateCentroid(id))?;
            let privacy_score = privacy_score(members.iter().map(|&r| bundle.records[r].label));
            if privacy_score.is_none() {
                log::warn!("cluster {id} has no labeled members; privacy score left empty");
            }
            Ok(Cluster {
                id,
                member_ids: members.iter().map(|&r| bundle.records[r].id.clone()).collect(),
                centroid,
                privacy_score,
                name: format!("cluster-{id}"),
            })
        })
        .collect()
}
