//! HDBSCAN clustering over small point sets.
//!
//! Pipeline: core distances (k = min cluster size), mutual-reachability
//! distances, minimum spanning tree (Prim), single-linkage dendrogram,
//! condensed cluster tree, stability-based extraction. The root cluster
//! participates in the extraction, so a set with no density split comes back
//! as one cluster containing every point instead of all-noise.
//!
//! Membership strengths are lambda_point / lambda_max within each extracted
//! cluster; noise points get 0.
//!
//! When the root ends up the only winner, membership uses a relative density
//! window: points whose lambda falls more than [`DENSITY_WINDOW`] below the
//! cluster maximum are noise. This keeps uniform point sets intact while
//! still shedding far stragglers.

/// Density ratio separating members from noise when the root cluster is the
/// lone winner.
pub const DENSITY_WINDOW: f64 = 10.0;

/// Cluster assignment for each input point plus membership strengths.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    /// Per-point cluster index (dense in `0..cluster_count`), `None` = noise.
    pub labels: Vec<Option<u32>>,
    /// Membership strength in [0, 1]; exactly 0 for noise points.
    pub probabilities: Vec<f64>,
    pub cluster_count: usize,
}

impl ClusterResult {
    pub fn members(&self, cluster: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(cluster))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.cluster_count];
        for l in self.labels.iter().flatten() {
            sizes[*l as usize] += 1;
        }
        sizes
    }

    /// Largest cluster; ties broken by lowest label. `None` when empty.
    pub fn major_cluster(&self) -> Option<u32> {
        let sizes = self.cluster_sizes();
        sizes
            .iter()
            .enumerate()
            .max_by_key(|(i, &s)| (s, std::cmp::Reverse(*i)))
            .map(|(i, _)| i as u32)
    }
}

/// Clusters points by Euclidean distance.
pub fn cluster(points: &[Vec<f64>], min_cluster_size: usize) -> ClusterResult {
    let n = points.len();
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    cluster_from_distances(&dist, min_cluster_size)
}

/// Clusters points given a symmetric pairwise distance matrix.
pub fn cluster_from_distances(dist: &[Vec<f64>], min_cluster_size: usize) -> ClusterResult {
    let n = dist.len();
    assert!(n >= 1, "need at least one point");
    assert!(min_cluster_size >= 2, "min_cluster_size must be >= 2");
    if n == 1 {
        return ClusterResult {
            labels: vec![Some(0)],
            probabilities: vec![1.0],
            cluster_count: 1,
        };
    }

    let core = core_distances(dist, min_cluster_size);
    let mrd = |a: usize, b: usize| dist[a][b].max(core[a]).max(core[b]);

    // Prim's MST over the dense mutual-reachability graph.
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut best_from = vec![0usize; n];
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n - 1);
    let mut current = 0usize;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_dist = f64::INFINITY;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let d = mrd(current, v);
            if d < best[v] {
                best[v] = d;
                best_from[v] = current;
            }
            if best[v] < next_dist {
                next_dist = best[v];
                next = v;
            }
        }
        edges.push((best[next], best_from[next], next));
        in_tree[next] = true;
        current = next;
    }
    edges.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));

    // Single-linkage dendrogram: leaves 0..n, internal nodes n..2n-1.
    let mut uf = UnionFind::new(2 * n - 1);
    let mut merges: Vec<Merge> = Vec::with_capacity(n - 1);
    for (i, &(d, a, b)) in edges.iter().enumerate() {
        let ra = uf.find(a);
        let rb = uf.find(b);
        let node = n + i;
        merges.push(Merge {
            left: ra,
            right: rb,
            dist: d,
            size: uf.size(ra) + uf.size(rb),
        });
        uf.union(ra, node);
        uf.union(rb, node);
    }

    let condensed = condense(&merges, n, min_cluster_size);
    let (selected, root_cluster) = extract_clusters(&condensed, n);
    label_points(&condensed, &selected, root_cluster, n)
}

/// Distance to the k-th nearest neighbor, counting the point itself.
fn core_distances(dist: &[Vec<f64>], k: usize) -> Vec<f64> {
    let n = dist.len();
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = dist[i].clone();
            row.sort_by(|a, b| a.partial_cmp(b).unwrap());
            row[(k - 1).min(n - 1)]
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct Merge {
    left: usize,
    right: usize,
    dist: f64,
    size: usize,
}

/// Row of the condensed tree: `child` (point id < n, or cluster id >= n)
/// detaches from `parent` at density `lambda`, carrying `size` points.
#[derive(Clone, Copy, Debug)]
struct CondensedRow {
    parent: usize,
    child: usize,
    lambda: f64,
    size: usize,
}

fn lambda_of(dist: f64) -> f64 {
    if dist > 0.0 {
        1.0 / dist
    } else {
        f64::INFINITY
    }
}

fn node_size(node: usize, merges: &[Merge], n: usize) -> usize {
    if node < n {
        1
    } else {
        merges[node - n].size
    }
}

/// Leaf points under a dendrogram node.
fn collect_leaves(node: usize, merges: &[Merge], n: usize, out: &mut Vec<usize>) {
    if node < n {
        out.push(node);
        return;
    }
    let m = merges[node - n];
    collect_leaves(m.left, merges, n, out);
    collect_leaves(m.right, merges, n, out);
}

/// Condenses the dendrogram: clusters persist through splits that only shed
/// groups smaller than `min_cluster_size`; splits into two big children give
/// both children fresh cluster ids.
fn condense(merges: &[Merge], n: usize, min_cluster_size: usize) -> Vec<CondensedRow> {
    let root = n + merges.len() - 1;
    let root_cluster = n; // condensed cluster ids start at n
    let mut next_cluster = n + 1;
    let mut rows = Vec::new();
    // (dendrogram node, condensed cluster it belongs to)
    let mut queue = std::collections::VecDeque::from([(root, root_cluster)]);

    while let Some((node, cluster)) = queue.pop_front() {
        if node < n {
            continue;
        }
        let m = merges[node - n];
        let lambda = lambda_of(m.dist);
        let left_size = node_size(m.left, merges, n);
        let right_size = node_size(m.right, merges, n);
        let left_big = left_size >= min_cluster_size;
        let right_big = right_size >= min_cluster_size;

        match (left_big, right_big) {
            (true, true) => {
                for (child, size) in [(m.left, left_size), (m.right, right_size)] {
                    let id = next_cluster;
                    next_cluster += 1;
                    rows.push(CondensedRow {
                        parent: cluster,
                        child: id,
                        lambda,
                        size,
                    });
                    queue.push_back((child, id));
                }
            }
            (false, false) => {
                let mut leaves = Vec::new();
                collect_leaves(m.left, merges, n, &mut leaves);
                collect_leaves(m.right, merges, n, &mut leaves);
                for p in leaves {
                    rows.push(CondensedRow {
                        parent: cluster,
                        child: p,
                        lambda,
                        size: 1,
                    });
                }
            }
            (big_left, _) => {
                let (big, small) = if big_left {
                    (m.left, m.right)
                } else {
                    (m.right, m.left)
                };
                let mut leaves = Vec::new();
                collect_leaves(small, merges, n, &mut leaves);
                for p in leaves {
                    rows.push(CondensedRow {
                        parent: cluster,
                        child: p,
                        lambda,
                        size: 1,
                    });
                }
                queue.push_back((big, cluster));
            }
        }
    }
    rows
}

/// Stability-based extraction with the root competing like any cluster.
/// Returns selected condensed cluster ids and the root id.
fn extract_clusters(rows: &[CondensedRow], n: usize) -> (Vec<usize>, usize) {
    let root = n;
    let mut cluster_ids: Vec<usize> = rows
        .iter()
        .filter(|r| r.child >= n)
        .map(|r| r.child)
        .collect();
    cluster_ids.push(root);
    cluster_ids.sort_unstable();

    // lambda at which each cluster is born (root: 0).
    let mut birth = std::collections::HashMap::new();
    birth.insert(root, 0.0);
    for r in rows {
        if r.child >= n {
            birth.insert(r.child, r.lambda);
        }
    }

    let mut stability = std::collections::HashMap::new();
    for &c in &cluster_ids {
        let b = birth[&c];
        let s: f64 = rows
            .iter()
            .filter(|r| r.parent == c)
            .map(|r| {
                let contribution = (r.lambda - b) * r.size as f64;
                if contribution.is_nan() {
                    // inf - inf at zero-diameter splits: no extra persistence.
                    0.0
                } else {
                    contribution
                }
            })
            .sum();
        stability.insert(c, s);
    }

    let mut selected = std::collections::HashMap::new();
    // Deepest clusters have the highest ids; walk bottom-up.
    for &c in cluster_ids.iter().rev() {
        let children: Vec<usize> = rows
            .iter()
            .filter(|r| r.parent == c && r.child >= n)
            .map(|r| r.child)
            .collect();
        let child_sum: f64 = children.iter().map(|ch| stability[ch]).sum();
        if children.is_empty() || stability[&c] > child_sum {
            selected.insert(c, true);
            // Deselect every descendant cluster.
            let mut stack = children;
            while let Some(d) = stack.pop() {
                selected.insert(d, false);
                stack.extend(
                    rows.iter()
                        .filter(|r| r.parent == d && r.child >= n)
                        .map(|r| r.child),
                );
            }
        } else {
            stability.insert(c, child_sum);
        }
    }

    let mut winners: Vec<usize> = selected
        .into_iter()
        .filter_map(|(c, keep)| keep.then_some(c))
        .collect();
    winners.sort_unstable();
    (winners, root)
}

fn label_points(
    rows: &[CondensedRow],
    selected: &[usize],
    root: usize,
    n: usize,
) -> ClusterResult {
    let mut labels: Vec<Option<u32>> = vec![None; n];
    let mut lambdas = vec![0.0f64; n];

    // Points in each selected condensed cluster's subtree.
    let mut point_sets: Vec<Vec<usize>> = Vec::with_capacity(selected.len());
    for &c in selected {
        let mut points = Vec::new();
        let mut stack = vec![c];
        while let Some(cur) = stack.pop() {
            for r in rows.iter().filter(|r| r.parent == cur) {
                if r.child >= n {
                    stack.push(r.child);
                } else {
                    points.push(r.child);
                    lambdas[r.child] = r.lambda;
                }
            }
        }
        if c == root && selected.len() == 1 {
            // Root as the lone winner: keep points within the density window
            // of the densest member.
            let lambda_max = points.iter().map(|&p| lambdas[p]).fold(0.0f64, f64::max);
            points.retain(|&p| lambdas[p] >= lambda_max / DENSITY_WINDOW);
        }
        points.sort_unstable();
        point_sets.push(points);
    }

    // Dense labels ordered by each cluster's smallest member index.
    let mut order: Vec<usize> = (0..point_sets.len()).collect();
    order.sort_by_key(|&i| point_sets[i].first().copied().unwrap_or(usize::MAX));

    let mut probabilities = vec![0.0f64; n];
    let mut label_next = 0u32;
    for &si in order.iter() {
        let points = &point_sets[si];
        if points.is_empty() {
            continue;
        }
        let label = label_next;
        label_next += 1;
        let lambda_max = points.iter().map(|&p| lambdas[p]).fold(0.0f64, f64::max);
        for &p in points {
            labels[p] = Some(label);
            probabilities[p] = if lambda_max == 0.0 {
                1.0
            } else if lambda_max.is_infinite() {
                if lambdas[p].is_infinite() {
                    1.0
                } else {
                    0.0
                }
            } else {
                (lambdas[p] / lambda_max).clamp(0.0, 1.0)
            };
        }
    }

    ClusterResult {
        labels,
        probabilities,
        cluster_count: label_next as usize,
    }
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn size(&mut self, x: usize) -> usize {
        let r = self.find(x);
        self.size[r]
    }

    /// Attaches the set of `a` under the fresh node `b`.
    fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra == rb {
            return;
        }
        self.parent[ra] = rb;
        self.size[rb] += self.size[ra];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn blob(rng: &mut impl Rng, center: &[f64], spread: f64, count: usize) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                center
                    .iter()
                    .map(|&c| c + rng.random_range(-spread..spread))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_point_is_one_cluster() {
        let r = cluster(&[vec![1.0, 2.0]], 3);
        assert_eq!(r.cluster_count, 1);
        assert_eq!(r.labels, vec![Some(0)]);
        assert_eq!(r.probabilities, vec![1.0]);
    }

    #[test]
    fn identical_points_form_one_full_probability_cluster() {
        let pts = vec![vec![0.5, -0.5]; 6];
        let r = cluster(&pts, 3);
        assert_eq!(r.cluster_count, 1);
        assert!(r.labels.iter().all(|l| *l == Some(0)));
        assert!(r.probabilities.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn two_points_with_no_split_share_one_cluster() {
        let r = cluster(&[vec![0.0], vec![1.0]], 2);
        assert_eq!(r.cluster_count, 1);
        assert_eq!(r.labels, vec![Some(0), Some(0)]);
    }

    #[test]
    fn two_separated_families_are_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let mut pts = blob(&mut rng, &[0.0, 0.0], 0.05, 8);
            pts.extend(blob(&mut rng, &[10.0, 0.0], 0.05, 7));
            let r = cluster(&pts, 3);
            assert_eq!(r.cluster_count, 2, "labels {:?}", r.labels);
            let first = r.labels[0];
            assert!(r.labels[..8].iter().all(|l| *l == first));
            let second = r.labels[8];
            assert!(r.labels[8..].iter().all(|l| *l == second));
            assert_ne!(first, second);
        }
    }

    #[test]
    fn dense_core_with_far_stragglers_marks_them_noise() {
        let mut pts = vec![vec![0.0, 0.0], vec![0.01, 0.0], vec![0.0, 0.01]];
        pts.push(vec![50.0, 0.0]);
        pts.push(vec![0.0, 80.0]);
        let r = cluster(&pts, 3);
        assert_eq!(r.cluster_count, 1);
        assert_eq!(r.labels[0], Some(0));
        assert_eq!(r.labels[1], Some(0));
        assert_eq!(r.labels[2], Some(0));
        assert_eq!(r.labels[3], None);
        assert_eq!(r.labels[4], None);
        assert_eq!(r.probabilities[3], 0.0);
        assert_eq!(r.probabilities[4], 0.0);
    }

    #[test]
    fn labels_are_invariant_to_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = blob(&mut rng, &[0.0, 0.0], 0.1, 6);
        pts.extend(blob(&mut rng, &[5.0, 5.0], 0.1, 6));
        let base = cluster(&pts, 3);

        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<Vec<f64>> = order.iter().map(|&i| pts[i].clone()).collect();
        let moved = cluster(&shuffled, 3);

        // Same partition up to relabeling.
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let same_base = base.labels[order[i]] == base.labels[order[j]]
                    && base.labels[order[i]].is_some();
                let same_moved = moved.labels[i] == moved.labels[j] && moved.labels[i].is_some();
                assert_eq!(same_base, same_moved);
            }
            assert_eq!(base.labels[order[i]].is_none(), moved.labels[i].is_none());
        }
    }

    #[test]
    fn labels_are_invariant_to_distance_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut pts = blob(&mut rng, &[0.0, 0.0], 0.2, 7);
        pts.extend(blob(&mut rng, &[8.0, 1.0], 0.2, 5));
        let n = pts.len();
        let mut dist = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                dist[i][j] = pts[i]
                    .iter()
                    .zip(&pts[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        let base = cluster_from_distances(&dist, 3);
        for scale in [0.001, 7.3, 5000.0] {
            let scaled: Vec<Vec<f64>> = dist
                .iter()
                .map(|row| row.iter().map(|d| d * scale).collect())
                .collect();
            let r = cluster_from_distances(&scaled, 3);
            assert_eq!(base.labels, r.labels, "scale {}", scale);
        }
    }

    #[test]
    fn major_cluster_breaks_ties_by_lowest_label() {
        let r = ClusterResult {
            labels: vec![Some(0), Some(0), Some(1), Some(1), None],
            probabilities: vec![1.0; 5],
            cluster_count: 2,
        };
        assert_eq!(r.major_cluster(), Some(0));
    }
}
