//! Cluster validity: silhouette (cosine distance, outliers removed) and DBCV.

use super::{ClusterAssignment, ClusterError};
use crate::bundle::EmbeddingMatrix;
use crate::linalg::{dot, euclidean, norm};

/// Cosine distance; a zero vector is treated as orthogonal to everything.
fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot(a, b) / (na * nb)
}

fn members(assignment: &ClusterAssignment) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); assignment.n_clusters];
    for (i, &l) in assignment.labels.iter().enumerate() {
        if l >= 0 {
            out[l as usize].push(i);
        }
    }
    out.retain(|m| !m.is_empty());
    out
}

/// Mean silhouette over non-outlier points using cosine distance.
/// Points in singleton clusters score 0.
pub fn silhouette(points: &EmbeddingMatrix, assignment: &ClusterAssignment) -> Result<f64, ClusterError> {
    check_len(points, assignment)?;
    let clusters = members(assignment);
    if clusters.len() < 2 {
        return Err(ClusterError::SingleCluster);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (ci, own) in clusters.iter().enumerate() {
        for &i in own {
            count += 1;
            if own.len() < 2 {
                continue;
            }
            let x = points.row(i);
            let a = own
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| cosine_distance(x, points.row(j)))
                .sum::<f64>()
                / (own.len() - 1) as f64;
            let b = clusters
                .iter()
                .enumerate()
                .filter(|(cj, _)| *cj != ci)
                .map(|(_, other)| {
                    other.iter().map(|&j| cosine_distance(x, points.row(j))).sum::<f64>() / other.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                total += (b - a) / denom;
            }
        }
    }
    Ok(total / count as f64)
}

fn check_len(points: &EmbeddingMatrix, assignment: &ClusterAssignment) -> Result<(), ClusterError> {
    if points.count() != assignment.labels.len() {
        return Err(ClusterError::LengthMismatch {
            points: points.count(),
            labels: assignment.labels.len(),
        });
    }
    Ok(())
}

/// All-points core distance of every member, computed in log space:
/// `(mean_{q != p, d > 0} d(p, q)^-D)^(-1/D)` with the sum divided by `|C| - 1`.
fn all_points_core(points: &EmbeddingMatrix, idx: &[usize]) -> Vec<f64> {
    let dim = points.dim() as f64;
    let m = idx.len();
    let logs: Vec<Option<f64>> = idx
        .iter()
        .map(|&p| {
            let terms: Vec<f64> = idx
                .iter()
                .map(|&q| euclidean(points.row(p), points.row(q)))
                .filter(|&d| d > 0.0)
                .map(|d| -dim * d.ln())
                .collect();
            if terms.is_empty() {
                return None;
            }
            let hi = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = hi + terms.iter().map(|t| (t - hi).exp()).sum::<f64>().ln();
            Some(lse - ((m - 1) as f64).ln())
        })
        .collect();
    if logs.iter().all(Option::is_none) {
        return vec![0.0; m];
    }
    logs.into_iter()
        .map(|l| match l {
            Some(l) => (-l / dim).exp(),
            None => f64::INFINITY,
        })
        .collect()
}

/// Prim MST over a dense symmetric weight matrix; returns (a, b, w) edges.
fn dense_mst(w: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let m = w.len();
    let mut in_tree = vec![false; m];
    let mut best = vec![f64::INFINITY; m];
    let mut from = vec![0usize; m];
    let mut edges = Vec::with_capacity(m.saturating_sub(1));
    let mut cur = 0;
    in_tree[0] = true;
    for _ in 1..m {
        let mut next = usize::MAX;
        for j in 0..m {
            if in_tree[j] {
                continue;
            }
            if w[cur][j] < best[j] {
                best[j] = w[cur][j];
                from[j] = cur;
            }
            if next == usize::MAX || best[j] < best[next] {
                next = j;
            }
        }
        // attach to the lowest-index tree vertex at the minimal weight
        let w_next = best[next];
        let anchor = (0..m).find(|&i| in_tree[i] && w[next][i] == w_next).unwrap_or(from[next]);
        in_tree[next] = true;
        edges.push((anchor, next, w_next));
        cur = next;
    }
    edges
}

struct ClusterDensity {
    idx: Vec<usize>,
    core: Vec<f64>,
    internal: Vec<usize>,
    sparseness: f64,
}

fn cluster_density(points: &EmbeddingMatrix, idx: Vec<usize>) -> ClusterDensity {
    let core = all_points_core(points, &idx);
    let m = idx.len();
    let w: Vec<Vec<f64>> = (0..m)
        .map(|a| {
            (0..m)
                .map(|b| {
                    euclidean(points.row(idx[a]), points.row(idx[b]))
                        .max(core[a])
                        .max(core[b])
                })
                .collect()
        })
        .collect();
    let mst = dense_mst(&w);
    let mut degree = vec![0usize; m];
    for &(a, b, _) in &mst {
        degree[a] += 1;
        degree[b] += 1;
    }
    let mut internal: Vec<usize> = (0..m).filter(|&v| degree[v] > 1).collect();
    if internal.is_empty() {
        internal.push(0);
    }
    let is_internal = |v: usize| degree[v] > 1;
    let internal_edges: Vec<f64> = mst
        .iter()
        .filter(|(a, b, _)| is_internal(*a) && is_internal(*b))
        .map(|e| e.2)
        .collect();
    // with no internal edges, fall back to the largest MST edge
    let sparseness = if internal_edges.is_empty() {
        mst.iter().map(|e| e.2).fold(f64::NEG_INFINITY, f64::max)
    } else {
        internal_edges.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };
    ClusterDensity {
        idx,
        core,
        internal,
        sparseness,
    }
}

fn separation(points: &EmbeddingMatrix, a: &ClusterDensity, b: &ClusterDensity) -> f64 {
    let mut best = f64::INFINITY;
    for &i in &a.internal {
        for &j in &b.internal {
            let d = euclidean(points.row(a.idx[i]), points.row(b.idx[j]))
                .max(a.core[i])
                .max(b.core[j]);
            best = best.min(d);
        }
    }
    best
}

/// Density-based cluster validity over all points, outliers included in the
/// size weighting. A lone cluster has unbounded separation and scores 1.
pub fn dbcv(points: &EmbeddingMatrix, assignment: &ClusterAssignment) -> Result<f64, ClusterError> {
    check_len(points, assignment)?;
    let clusters = members(assignment);
    if clusters.is_empty() {
        return Err(ClusterError::NoClusters);
    }
    if let Some(small) = clusters.iter().find(|c| c.len() < 2) {
        return Err(ClusterError::TooFewPoints {
            points: small.len(),
            needed: 2,
        });
    }
    let dens: Vec<ClusterDensity> = clusters.into_iter().map(|c| cluster_density(points, c)).collect();
    let n = points.count() as f64;
    let mut total = 0.0;
    for (i, di) in dens.iter().enumerate() {
        let sep = dens
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, dj)| separation(points, di, dj))
            .fold(f64::INFINITY, f64::min);
        let v = if sep.is_infinite() {
            1.0
        } else {
            let denom = sep.max(di.sparseness);
            if denom > 0.0 {
                (sep - di.sparseness) / denom
            } else {
                0.0
            }
        };
        total += di.idx.len() as f64 / n * v;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Vec<f64>>) -> EmbeddingMatrix {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        EmbeddingMatrix::from_rows(rows, ids).unwrap()
    }

    #[test]
    fn orthogonal_identical_clusters_score_one() {
        let pts = matrix(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0], vec![0.0, 2.0]]);
        let a = ClusterAssignment {
            labels: vec![0, 0, 1, 1],
            n_clusters: 2,
        };
        assert_eq!(silhouette(&pts, &a).unwrap(), 1.0);
    }

    #[test]
    fn single_cluster_is_rejected() {
        let pts = matrix(vec![vec![1.0, 0.0], vec![1.0, 0.1], vec![5.0, 5.0]]);
        let a = ClusterAssignment {
            labels: vec![0, 0, -1],
            n_clusters: 1,
        };
        assert!(matches!(silhouette(&pts, &a), Err(ClusterError::SingleCluster)));
        assert_eq!(dbcv(&pts, &a).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn dbcv_rejects_singletons() {
        let pts = matrix(vec![vec![1.0], vec![2.0], vec![9.0]]);
        let a = ClusterAssignment {
            labels: vec![0, 0, 1],
            n_clusters: 2,
        };
        assert!(matches!(dbcv(&pts, &a), Err(ClusterError::TooFewPoints { .. })));
    }
}
