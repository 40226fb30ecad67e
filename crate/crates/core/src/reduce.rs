//! Dimensionality reduction ahead of clustering.
//!
//! PCA is the reference reducer. `Precomputed` passes through a reduced matrix
//! produced elsewhere (for example UMAP outputs shipped as `reduced.bin`).

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::EmbeddingMatrix;

#[derive(Debug, Error)]
pub enum ReduceError {
    #[error("PCA needs more points ({points}) than target dimensions ({target})")]
    RankDeficient { points: usize, target: usize },
    #[error("precomputed reduction requested but no reduced.bin is present")]
    MissingPrecomputed,
    #[error("target dim {target} must be in 1..{input}")]
    InvalidTargetDim { target: usize, input: usize },
    #[error("precomputed reduction has {found} rows, expected {expected}")]
    RowMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceMethod {
    Pca,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReducerConfig {
    pub method: ReduceMethod,
    pub target_dim: usize,
}

impl Default for ReducerConfig {
    fn default() -> Self {
        ReducerConfig {
            method: ReduceMethod::Pca,
            target_dim: 5,
        }
    }
}

/// A fitted principal component projection.
#[derive(Debug, Clone)]
pub struct Pca {
    mean: Vec<f64>,
    /// `target_dim` rows of length `input_dim`, unit norm, mutually orthogonal.
    components: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn fit(x: &EmbeddingMatrix, target_dim: usize) -> Result<Pca, ReduceError> {
        let (n, d) = (x.count(), x.dim());
        if target_dim == 0 || target_dim >= d {
            return Err(ReduceError::InvalidTargetDim {
                target: target_dim,
                input: d,
            });
        }
        if n <= target_dim {
            return Err(ReduceError::RankDeficient {
                points: n,
                target: target_dim,
            });
        }
        let mut mean = vec![0.0; d];
        for row in x.rows() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let centered = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] - mean[j]);
        let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..d).collect();
        // descending eigenvalue, ties by component index
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut components = Vec::with_capacity(target_dim);
        let mut eigenvalues = Vec::with_capacity(target_dim);
        for &k in order.iter().take(target_dim) {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |best, (i, x)| if x.abs() > best.1.abs() { (i, *x) } else { best });
            if lead.1 < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            eigenvalues.push(eig.eigenvalues[k]);
        }
        Ok(Pca {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    /// Maps a reduced point back into the input space.
    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, zi) in self.components.iter().zip(z) {
            out.iter_mut().zip(c).for_each(|(o, ci)| *o += zi * ci);
        }
        out
    }

    pub fn transform(&self, x: &EmbeddingMatrix) -> EmbeddingMatrix {
        let rows = x.rows().map(|r| self.project(r)).collect();
        EmbeddingMatrix::from_rows(rows, x.row_ids().to_vec()).expect("projection keeps row shape")
    }
}

/// Reduces `embeddings` to `cfg.target_dim` dimensions, preserving row order.
///
/// PCA is deterministic, so `seed` only matters for stochastic reducers;
/// it is accepted to keep the stage signature uniform.
pub fn fit_reduce(
    embeddings: &EmbeddingMatrix,
    cfg: &ReducerConfig,
    _seed: u64,
    precomputed: Option<&EmbeddingMatrix>,
) -> Result<EmbeddingMatrix, ReduceError> {
    match cfg.method {
        ReduceMethod::Pca => Ok(Pca::fit(embeddings, cfg.target_dim)?.transform(embeddings)),
        ReduceMethod::Precomputed => {
            let red = precomputed.ok_or(ReduceError::MissingPrecomputed)?;
            if red.count() != embeddings.count() {
                return Err(ReduceError::RowMismatch {
                    expected: embeddings.count(),
                    found: red.count(),
                });
            }
            Ok(red.clone())
        }
    }
}
