//! HDBSCAN over Euclidean points: core distances, mutual-reachability minimum
//! spanning tree, single-linkage hierarchy, condensed tree and excess-of-mass
//! cluster selection.

use rayon::prelude::*;

use super::{ClusterAssignment, ClusterConfig, ClusterError};
use crate::bundle::EmbeddingMatrix;
use crate::linalg::euclidean;

#[derive(Debug, Clone, Copy)]
struct MstEdge {
    a: usize,
    b: usize,
    weight: f64,
}

#[derive(Debug, Clone, Copy)]
struct Merge {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

/// One edge of the condensed tree: `child` is a point (`< n`) or a cluster (`>= n`).
#[derive(Debug, Clone, Copy)]
struct CondensedEdge {
    parent: usize,
    child: usize,
    lambda: f64,
    size: usize,
}

/// Distance to the `k`-th nearest neighbour, counting the point itself.
fn core_distances(points: &EmbeddingMatrix, k: usize) -> Vec<f64> {
    let n = points.count();
    let k = k.clamp(1, n);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n).map(|j| euclidean(points.row(i), points.row(j))).collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
            *kth
        })
        .collect()
}

/// Prim's algorithm on the dense mutual-reachability graph. Ties go to the
/// lower point index.
fn mutual_reachability_mst(points: &EmbeddingMatrix, core: &[f64]) -> Vec<MstEdge> {
    let n = points.count();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut best_from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = euclidean(points.row(current), points.row(j))
                .max(core[current])
                .max(core[j]);
            if d < best[j] {
                best[j] = d;
                best_from[j] = current;
            }
            if next == usize::MAX || best[j] < next_w {
                next = j;
                next_w = best[j];
            }
        }
        in_tree[next] = true;
        edges.push(MstEdge {
            a: best_from[next],
            b: next,
            weight: next_w,
        });
        current = next;
    }
    // stable: equal weights keep discovery order
    edges.sort_by(|x, y| x.weight.total_cmp(&y.weight));
    edges
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
    next: usize,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..2 * n).collect(),
            size: (0..2 * n).map(|i| usize::from(i < n)).collect(),
            next: n,
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let up = self.parent[x];
            self.parent[x] = root;
            x = up;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) -> usize {
        let id = self.next;
        self.next += 1;
        self.parent[a] = id;
        self.parent[b] = id;
        self.size[id] = self.size[a] + self.size[b];
        id
    }
}

fn single_linkage(n: usize, mst: &[MstEdge]) -> Vec<Merge> {
    let mut uf = UnionFind::new(n);
    mst.iter()
        .map(|e| {
            let left = uf.find(e.a);
            let right = uf.find(e.b);
            let size = uf.size[left] + uf.size[right];
            uf.union(left, right);
            Merge {
                left,
                right,
                distance: e.weight,
                size,
            }
        })
        .collect()
}

fn leaves_under(node: usize, n: usize, merges: &[Merge]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        if x < n {
            out.push(x);
        } else {
            let m = &merges[x - n];
            stack.push(m.right);
            stack.push(m.left);
        }
    }
    out
}

fn lambda_of(distance: f64) -> f64 {
    if distance > 0.0 {
        1.0 / distance
    } else {
        f64::INFINITY
    }
}

/// Condenses the single-linkage hierarchy. Condensed cluster ids start at `n`
/// (the root). A merge at distance zero is not treated as a split: clusters
/// born at infinite density carry no stability information.
fn condense(n: usize, merges: &[Merge], min_cluster_size: usize) -> Vec<CondensedEdge> {
    let size_of = |x: usize| if x < n { 1 } else { merges[x - n].size };
    let root = 2 * n - 2;
    let mut relabel = vec![0usize; 2 * n - 1];
    relabel[root] = n;
    let mut next_label = n + 1;
    let mut out = Vec::new();
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(node) = queue.pop_front() {
        if node < n {
            continue;
        }
        let m = merges[node - n];
        let parent = relabel[node];
        let lambda = lambda_of(m.distance);
        let fall_out = |sub: usize, out: &mut Vec<CondensedEdge>| {
            for p in leaves_under(sub, n, merges) {
                out.push(CondensedEdge {
                    parent,
                    child: p,
                    lambda,
                    size: 1,
                });
            }
        };
        let (ls, rs) = (size_of(m.left), size_of(m.right));
        let left_big = ls >= min_cluster_size;
        let right_big = rs >= min_cluster_size;
        if m.distance <= 0.0 {
            fall_out(node, &mut out);
        } else if left_big && right_big {
            for (child, size) in [(m.left, ls), (m.right, rs)] {
                relabel[child] = next_label;
                out.push(CondensedEdge {
                    parent,
                    child: next_label,
                    lambda,
                    size,
                });
                next_label += 1;
                queue.push_back(child);
            }
        } else if !left_big && !right_big {
            fall_out(m.left, &mut out);
            fall_out(m.right, &mut out);
        } else {
            let (big, small) = if left_big { (m.left, m.right) } else { (m.right, m.left) };
            fall_out(small, &mut out);
            relabel[big] = parent;
            queue.push_back(big);
        }
    }
    out
}

/// Excess-of-mass selection. Returns selected condensed cluster ids
/// (ascending) and whether the root-only fallback was used.
fn select_clusters(n: usize, tree: &[CondensedEdge]) -> (Vec<usize>, bool) {
    let n_nodes = tree
        .iter()
        .map(|e| e.parent.max(e.child))
        .max()
        .map_or(n + 1, |m| m.max(n) + 1)
        - n;
    let mut birth = vec![0.0f64; n_nodes];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for e in tree.iter().filter(|e| e.child >= n) {
        birth[e.child - n] = e.lambda;
        children[e.parent - n].push(e.child - n);
    }
    let mut stability = vec![0.0f64; n_nodes];
    for e in tree {
        let c = e.parent - n;
        stability[c] += (e.lambda - birth[c]) * e.size as f64;
    }
    if n_nodes == 1 {
        return (vec![n], true);
    }
    let mut selected = vec![false; n_nodes];
    // children always carry larger ids than their parent
    for c in (1..n_nodes).rev() {
        let subtree: f64 = children[c].iter().map(|&k| stability[k]).sum();
        if subtree > stability[c] {
            stability[c] = subtree;
        } else {
            selected[c] = true;
            let mut stack = children[c].clone();
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend_from_slice(&children[k]);
            }
        }
    }
    let chosen: Vec<usize> = (1..n_nodes).filter(|&c| selected[c]).map(|c| c + n).collect();
    (chosen, false)
}

fn label_points(n: usize, tree: &[CondensedEdge], selected: &[usize], root_only: bool) -> Vec<i32> {
    let mut labels = vec![-1i32; n];
    if root_only {
        let max_lambda = tree
            .iter()
            .filter(|e| e.parent == n)
            .map(|e| e.lambda)
            .fold(f64::NEG_INFINITY, f64::max);
        for e in tree.iter().filter(|e| e.child < n) {
            if e.lambda >= max_lambda {
                labels[e.child] = 0;
            }
        }
        return labels;
    }
    let n_nodes = tree.iter().map(|e| e.parent.max(e.child)).max().unwrap_or(n) + 1 - n;
    let mut up = vec![usize::MAX; n_nodes.max(1)];
    for e in tree.iter().filter(|e| e.child >= n) {
        up[e.child - n] = e.parent;
    }
    let mut label_of = vec![-1i32; n_nodes.max(1)];
    for (i, &c) in selected.iter().enumerate() {
        label_of[c - n] = i as i32;
    }
    for e in tree.iter().filter(|e| e.child < n) {
        let mut c = e.parent;
        loop {
            if label_of[c - n] >= 0 {
                labels[e.child] = label_of[c - n];
                break;
            }
            match up[c - n] {
                usize::MAX => break,
                p => c = p,
            }
        }
    }
    labels
}

/// Density-based clustering of `points` under `cfg`.
///
/// Points not claimed by any selected cluster are labeled `-1`. When the
/// hierarchy never splits into two clusters of at least `min_cluster_size`,
/// the whole data set is returned as one cluster holding the points that
/// persist to the highest density level.
pub fn hdbscan(points: &EmbeddingMatrix, cfg: &ClusterConfig) -> Result<ClusterAssignment, ClusterError> {
    cfg.validate()?;
    let n = points.count();
    if n < cfg.min_cluster_size || n < 2 {
        return Err(ClusterError::TooFewPoints {
            points: n,
            needed: cfg.min_cluster_size.max(2),
        });
    }
    let core = core_distances(points, cfg.min_samples());
    let mst = mutual_reachability_mst(points, &core);
    let merges = single_linkage(n, &mst);
    let tree = condense(n, &merges, cfg.min_cluster_size);
    let (selected, root_only) = select_clusters(n, &tree);
    let labels = label_points(n, &tree, &selected, root_only);
    let n_clusters = if root_only { 1 } else { selected.len() };
    Ok(ClusterAssignment { labels, n_clusters })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Vec<f64>>) -> EmbeddingMatrix {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        EmbeddingMatrix::from_rows(rows, ids).unwrap()
    }

    #[test]
    fn core_distance_counts_self() {
        let pts = matrix(vec![vec![0.0], vec![1.0], vec![3.0]]);
        assert_eq!(core_distances(&pts, 1), vec![0.0, 0.0, 0.0]);
        assert_eq!(core_distances(&pts, 2), vec![1.0, 1.0, 2.0]);
    }

    #[test]
    fn identical_points_form_one_cluster() {
        let pts = matrix(vec![vec![0.5, 0.5]; 20]);
        let a = hdbscan(&pts, &ClusterConfig::new(5)).unwrap();
        assert_eq!(a.n_clusters, 1);
        assert!(a.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn too_few_points() {
        let pts = matrix(vec![vec![0.0]; 3]);
        assert!(matches!(
            hdbscan(&pts, &ClusterConfig::new(5)),
            Err(ClusterError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn line_with_gap() {
        // two evenly spaced runs of 6 points separated by a wide gap
        let mut rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.1]).collect();
        rows.extend((0..6).map(|i| vec![10.0 + i as f64 * 0.1]));
        let a = hdbscan(&matrix(rows), &ClusterConfig::new(3)).unwrap();
        assert_eq!(a.n_clusters, 2);
        assert!(a.labels[..6].iter().all(|&l| l == a.labels[0]));
        assert!(a.labels[6..].iter().all(|&l| l == a.labels[6]));
        assert_ne!(a.labels[0], a.labels[6]);
    }
}
