//! Seeded k-means and the multi-granularity cluster tree.
//!
//! Descriptors are grouped top-down: one k-means per tree node splits that
//! node's members among its children, so every level is a strict refinement
//! of the level above. Level sizes are configurable (default `[1, 4, 8]`);
//! child counts per parent follow the largest-remainder method on member
//! counts, with every parent keeping at least one child.
//!
//! Everything is deterministic given the seed: k-means++ initialization,
//! restart selection, empty-cluster reseeding, and tie breaks (always the
//! lowest index). Node centers are exactly the mean of their members'
//! descriptors, which later serves as the expert-training target grouping.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::seeds::derive_seed2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent k-means++ restarts per invocation.
pub const KMEANS_RESTARTS: usize = 8;
/// Iteration cap per restart.
pub const KMEANS_MAX_ITERS: usize = 300;
/// Absolute inertia-improvement threshold that counts as converged.
pub const KMEANS_TOL: f64 = 1e-6;

const TAG_KMEANS: u64 = 0x5EED_0003;
const TAG_NODE: u64 = 0x5EED_0004;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("k = 0 clusters requested")]
    ZeroK,
    #[error("{n} points cannot form {k} clusters")]
    TooFewPoints { k: usize, n: usize },
    #[error("point {index} has dimension {got}, expected {want}")]
    DimensionMismatch { index: usize, want: usize, got: usize },
    #[error("level sizes {0:?} must be non-empty, non-decreasing, and at most the point count")]
    InvalidLevelSizes(Vec<usize>),
    #[error("tree json: {0}")]
    BadTreeJson(String),
    #[error("node id {0} out of range")]
    BadNodeId(usize),
    #[error("tree structure: {0}")]
    Inconsistent(String),
}

/// Output of one k-means run (best of [`KMEANS_RESTARTS`] restarts).
#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// Cluster centers; each is exactly the mean of its assigned points.
    pub centers: Vec<Vec<f64>>,
    /// Cluster index per input point.
    pub assignment: Vec<usize>,
    /// Final within-cluster sum of squared distances.
    pub inertia: f64,
    /// Inertia after each iteration of the winning restart (non-increasing).
    pub history: Vec<f64>,
}

fn check_dims(data: &[Vec<f64>]) -> Result<usize, ClusterError> {
    let dim = data[0].len();
    for (index, row) in data.iter().enumerate() {
        if row.len() != dim {
            return Err(ClusterError::DimensionMismatch { index, want: dim, got: row.len() });
        }
    }
    Ok(dim)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Nearest center by squared distance; ties take the lowest index.
fn nearest(centers: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = Vec::with_capacity(k);
    centers.push(data[rng.gen_range(0..data.len())].clone());
    let mut d2: Vec<f64> = data.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = data.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..data.len())
        };
        centers.push(data[next].clone());
        for (slot, p) in d2.iter_mut().zip(data) {
            *slot = slot.min(dist2(p, centers.last().unwrap()));
        }
    }
    centers
}

fn lloyd(data: &[Vec<f64>], k: usize, dim: usize, rng: &mut ChaCha8Rng) -> KmeansResult {
    let mut centers = plus_plus_init(data, k, rng);
    let mut assignment = vec![0usize; data.len()];
    let mut dists = vec![0.0f64; data.len()];
    let mut history = Vec::new();
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..KMEANS_MAX_ITERS {
        for (i, p) in data.iter().enumerate() {
            let (a, d) = nearest(&centers, p);
            assignment[i] = a;
            dists[i] = d;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, a) in data.iter().zip(&assignment) {
            counts[*a] += 1;
            for (s, x) in sums[*a].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut reseeded = false;
        let mut used = vec![false; data.len()];
        for c in 0..k {
            if counts[c] > 0 {
                for (slot, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *slot = s / counts[c] as f64;
                }
            } else {
                // Reseed an empty cluster at the unused point farthest from
                // its current center.
                let far = (0..data.len())
                    .filter(|i| !used[*i])
                    .max_by(|a, b| dists[*a].total_cmp(&dists[*b]).then(b.cmp(a)))
                    .expect("more clusters than points is rejected up front");
                used[far] = true;
                centers[c] = data[far].clone();
                reseeded = true;
            }
        }
        let inertia: f64 = data
            .iter()
            .map(|p| nearest(&centers, p).1)
            .sum();
        history.push(inertia);
        if !reseeded && prev_inertia - inertia <= KMEANS_TOL {
            break;
        }
        prev_inertia = inertia;
    }
    // Half-step: re-assign against the final centers, then set each center
    // to the exact mean of its members so the invariant `center == member
    // mean` holds in the returned result.
    for (i, p) in data.iter().enumerate() {
        assignment[i] = nearest(&centers, p).0;
    }
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, a) in data.iter().zip(&assignment) {
        counts[*a] += 1;
        for (s, x) in sums[*a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for (slot, s) in centers[c].iter_mut().zip(&sums[c]) {
                *slot = s / counts[c] as f64;
            }
        }
    }
    let inertia = data
        .iter()
        .zip(&assignment)
        .map(|(p, a)| dist2(p, &centers[*a]))
        .sum();
    KmeansResult { centers, assignment, inertia, history }
}

/// Seeded k-means++ with [`KMEANS_RESTARTS`] restarts; the lowest-inertia
/// restart wins (first such restart on ties). Deterministic per seed.
pub fn kmeans(data: &[Vec<f64>], k: usize, seed: u64) -> Result<KmeansResult, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if data.len() < k {
        return Err(ClusterError::TooFewPoints { k, n: data.len() });
    }
    let dim = check_dims(data)?;
    let mut best: Option<KmeansResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed2(seed, TAG_KMEANS, restart as u64));
        let run = lloyd(data, k, dim, &mut rng);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// One node of the granularity tree. Ids are assigned level by level, so a
/// level's nodes occupy a contiguous id range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    /// 0 is the coarsest level.
    pub level: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Mean descriptor of the node's training members.
    pub center: Vec<f64>,
    pub member_count: usize,
}

/// Hierarchy of cluster nodes with fixed per-level sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularityTree {
    pub level_sizes: Vec<usize>,
    pub nodes: Vec<TreeNode>,
}

/// A built tree plus the training assignment that produced it.
#[derive(Debug, Clone)]
pub struct TreeBuild {
    pub tree: GranularityTree,
    /// `assignments[level][i]` is the node id of training point `i`.
    pub assignments: Vec<Vec<usize>>,
}

/// Splits `total` children among parents: one guaranteed child each, the
/// surplus by largest remainder on member counts (ties to the lowest
/// parent index), capped at each parent's member count.
fn allocate_children(member_counts: &[usize], total: usize) -> Vec<usize> {
    let m = member_counts.len();
    debug_assert!(total >= m, "validated by build_tree");
    let n: usize = member_counts.iter().sum();
    let surplus = total - m;
    let mut alloc = vec![1usize; m];
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(m);
    let mut floored = 0usize;
    for (i, c) in member_counts.iter().enumerate() {
        let quota = surplus as f64 * *c as f64 / n as f64;
        let fl = quota.floor() as usize;
        alloc[i] += fl;
        floored += fl;
        remainders.push((quota - fl as f64, i));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, i) in remainders.iter().take(surplus - floored) {
        alloc[*i] += 1;
    }
    // A parent cannot split into more clusters than it has members; push any
    // excess to parents with headroom, in remainder order.
    loop {
        let mut overflow = 0usize;
        for (a, c) in alloc.iter_mut().zip(member_counts) {
            if *a > *c {
                overflow += *a - *c;
                *a = *c;
            }
        }
        if overflow == 0 {
            break;
        }
        let mut progressed = false;
        while overflow > 0 {
            let before = overflow;
            for (_, i) in &remainders {
                if overflow == 0 {
                    break;
                }
                if alloc[*i] < member_counts[*i] {
                    alloc[*i] += 1;
                    overflow -= 1;
                    progressed = true;
                }
            }
            if overflow == before {
                break;
            }
        }
        if !progressed || overflow > 0 {
            // total <= n is validated, so headroom always exists.
            unreachable!("child allocation exceeded total member count");
        }
    }
    alloc
}

/// Builds the granularity tree top-down. `level_sizes[0]` nodes partition
/// the whole corpus (the default configuration uses a single root), and each
/// subsequent level re-clusters every parent's members among its children.
pub fn build_tree(
    data: &[Vec<f64>],
    level_sizes: &[usize],
    seed: u64,
) -> Result<TreeBuild, ClusterError> {
    if level_sizes.is_empty()
        || level_sizes[0] == 0
        || level_sizes.windows(2).any(|w| w[0] > w[1])
        || *level_sizes.last().unwrap() > data.len()
    {
        return Err(ClusterError::InvalidLevelSizes(level_sizes.to_vec()));
    }
    check_dims(data)?;
    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut assignments: Vec<Vec<usize>> = Vec::new();

    let root_km = kmeans(data, level_sizes[0], derive_seed2(seed, TAG_NODE, 0))?;
    for (c, center) in root_km.centers.iter().enumerate() {
        nodes.push(TreeNode {
            id: c,
            level: 0,
            parent: None,
            children: Vec::new(),
            center: center.clone(),
            member_count: root_km.assignment.iter().filter(|a| **a == c).count(),
        });
    }
    assignments.push(root_km.assignment);

    for (level, &size) in level_sizes.iter().enumerate().skip(1) {
        let parent_ids: Vec<usize> =
            nodes.iter().filter(|n| n.level == level - 1).map(|n| n.id).collect();
        let parent_assign = assignments[level - 1].clone();
        let member_counts: Vec<usize> = parent_ids
            .iter()
            .map(|pid| parent_assign.iter().filter(|a| **a == *pid).count())
            .collect();
        let allocation = allocate_children(&member_counts, size);
        let mut level_assign = vec![usize::MAX; data.len()];
        let mut next_id = nodes.len();
        for (pid, child_count) in parent_ids.iter().zip(&allocation) {
            let member_idx: Vec<usize> = (0..data.len())
                .filter(|i| parent_assign[*i] == *pid)
                .collect();
            let members: Vec<Vec<f64>> = member_idx.iter().map(|i| data[*i].clone()).collect();
            let km = kmeans(&members, *child_count, derive_seed2(seed, TAG_NODE, *pid as u64 + 1))?;
            for (c, center) in km.centers.iter().enumerate() {
                let id = next_id + c;
                nodes.push(TreeNode {
                    id,
                    level,
                    parent: Some(*pid),
                    children: Vec::new(),
                    center: center.clone(),
                    member_count: km.assignment.iter().filter(|a| **a == c).count(),
                });
                nodes[*pid].children.push(id);
            }
            for (local, global) in km.assignment.iter().zip(&member_idx) {
                level_assign[*global] = next_id + *local;
            }
            next_id += child_count;
        }
        assignments.push(level_assign);
    }

    let tree = GranularityTree { level_sizes: level_sizes.to_vec(), nodes };
    tree.validate()?;
    Ok(TreeBuild { tree, assignments })
}

impl GranularityTree {
    /// Number of levels.
    pub fn depth(&self) -> usize {
        self.level_sizes.len()
    }

    /// First node id of a level.
    pub fn level_offset(&self, level: usize) -> usize {
        self.level_sizes[..level].iter().sum()
    }

    /// Node ids of a level, in order.
    pub fn level_ids(&self, level: usize) -> std::ops::Range<usize> {
        let start = self.level_offset(level);
        start..start + self.level_sizes[level]
    }

    pub fn node(&self, id: usize) -> Result<&TreeNode, ClusterError> {
        self.nodes.get(id).ok_or(ClusterError::BadNodeId(id))
    }

    /// Nearest finest-level node to `v` (squared Euclidean, ties to the
    /// lowest id).
    pub fn assign_finest(&self, v: &[f64]) -> usize {
        let range = self.level_ids(self.depth() - 1);
        let mut best = (range.start, f64::INFINITY);
        for id in range {
            let d = dist2(&self.nodes[id].center, v);
            if d < best.1 {
                best = (id, d);
            }
        }
        best.0
    }

    /// Chain of node ids from the coarsest level down to `id`, inclusive.
    pub fn ancestors(&self, id: usize) -> Result<Vec<usize>, ClusterError> {
        let mut chain = vec![self.node(id)?.id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        Ok(chain)
    }

    /// Structural invariants: contiguous level-ordered ids, consistent
    /// parent/child links, conserved member counts.
    pub fn validate(&self) -> Result<(), ClusterError> {
        let expected: usize = self.level_sizes.iter().sum();
        if self.nodes.len() != expected {
            return Err(ClusterError::Inconsistent(format!(
                "{} nodes but level sizes sum to {expected}",
                self.nodes.len()
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(ClusterError::Inconsistent(format!(
                    "node at position {i} has id {}",
                    node.id
                )));
            }
            if !self.level_ids(node.level).contains(&node.id) {
                return Err(ClusterError::Inconsistent(format!(
                    "node {i} level {} outside its id range",
                    node.level
                )));
            }
            match node.parent {
                None if node.level != 0 => {
                    return Err(ClusterError::Inconsistent(format!("non-root node {i} lacks a parent")));
                }
                Some(p) => {
                    let parent = self.node(p)?;
                    if parent.level + 1 != node.level || !parent.children.contains(&node.id) {
                        return Err(ClusterError::Inconsistent(format!(
                            "node {i} not linked to parent {p}"
                        )));
                    }
                }
                None => {}
            }
        }
        for level in 0..self.depth() {
            for id in self.level_ids(level) {
                let node = &self.nodes[id];
                if node.level + 1 < self.depth() {
                    if node.children.is_empty() {
                        return Err(ClusterError::Inconsistent(format!(
                            "interior node {id} has no children"
                        )));
                    }
                    let child_sum: usize =
                        node.children.iter().map(|c| self.nodes[*c].member_count).sum();
                    if child_sum != node.member_count {
                        return Err(ClusterError::Inconsistent(format!(
                            "node {id} members {} != child sum {child_sum}",
                            node.member_count
                        )));
                    }
                } else if !node.children.is_empty() {
                    return Err(ClusterError::Inconsistent(format!(
                        "leaf node {id} has children"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, ClusterError> {
        let tree: Self =
            serde_json::from_str(text).map_err(|e| ClusterError::BadTreeJson(e.to_string()))?;
        tree.validate()?;
        Ok(tree)
    }

    /// SHA-256 of the compact canonical serialization, hex-encoded.
    pub fn checksum(&self) -> String {
        let compact = serde_json::to_string(self).expect("tree serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(compact.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `count` points in a tight ball around the given center.
    fn blob(center: &[f64], count: usize, spread: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                center
                    .iter()
                    .map(|c| c + rng.gen_range(-spread..spread))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut data = blob(&[0.0, 0.0], 20, 0.3, 1);
        data.extend(blob(&[10.0, 0.0], 20, 0.3, 2));
        data.extend(blob(&[0.0, 10.0], 20, 0.3, 3));
        let km = kmeans(&data, 3, 7).unwrap();
        for chunk in km.assignment.chunks(20) {
            assert!(chunk.iter().all(|a| a == &chunk[0]), "blob split across clusters");
        }
        let labels: std::collections::BTreeSet<_> =
            km.assignment.chunks(20).map(|c| c[0]).collect();
        assert_eq!(labels.len(), 3);
    }

    #[test]
    fn kmeans_inertia_history_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<Vec<f64>> = (0..120)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let km = kmeans(&data, 5, 11).unwrap();
        for pair in km.history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "inertia rose: {} -> {}", pair[0], pair[1]);
        }
        assert!(km.inertia <= km.history[0] + 1e-9);
    }

    #[test]
    fn kmeans_centers_equal_member_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..4).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let km = kmeans(&data, 4, 3).unwrap();
        for c in 0..4 {
            let members: Vec<&Vec<f64>> = data
                .iter()
                .zip(&km.assignment)
                .filter(|(_, a)| **a == c)
                .map(|(p, _)| p)
                .collect();
            assert!(!members.is_empty(), "cluster {c} is empty");
            for d in 0..4 {
                let mean: f64 =
                    members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                assert!((mean - km.centers[c][d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kmeans_is_deterministic() {
        let data = blob(&[1.0, 2.0, 3.0], 40, 1.0, 4);
        let a = kmeans(&data, 3, 42).unwrap();
        let b = kmeans(&data, 3, 42).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.centers, b.centers);
        assert_eq!(a.inertia, b.inertia);
    }

    #[test]
    fn kmeans_validates_inputs() {
        let data = blob(&[0.0], 5, 1.0, 1);
        assert!(matches!(kmeans(&data, 0, 0), Err(ClusterError::ZeroK)));
        assert!(matches!(
            kmeans(&data, 6, 0),
            Err(ClusterError::TooFewPoints { k: 6, n: 5 })
        ));
        let ragged = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(matches!(
            kmeans(&ragged, 1, 0),
            Err(ClusterError::DimensionMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn nearest_breaks_ties_toward_lowest_index() {
        let centers = vec![vec![-1.0], vec![1.0]];
        assert_eq!(nearest(&centers, &[0.0]).0, 0);
    }

    #[test]
    fn child_allocation_uses_largest_remainder() {
        assert_eq!(allocate_children(&[30, 10], 5), vec![3, 2]);
        assert_eq!(allocate_children(&[100, 100, 100, 100], 8), vec![2, 2, 2, 2]);
        assert_eq!(allocate_children(&[5, 5, 5], 3), vec![1, 1, 1]);
        assert_eq!(allocate_children(&[2, 98], 6), vec![1, 5]);
        // Cap: the first parent cannot take 2 children with 1 member.
        assert_eq!(allocate_children(&[1, 3], 4), vec![1, 3]);
    }

    /// Four well-separated parent blobs, each made of two sub-blobs.
    fn nested_blobs() -> Vec<Vec<f64>> {
        let mut data = Vec::new();
        for (i, parent) in [[0.0, 0.0], [40.0, 0.0], [0.0, 40.0], [40.0, 40.0]]
            .iter()
            .enumerate()
        {
            for (j, off) in [[-3.0, 0.0], [3.0, 0.0]].iter().enumerate() {
                let center = [parent[0] + off[0], parent[1] + off[1]];
                data.extend(blob(&center, 50, 0.4, (i * 2 + j) as u64 + 1));
            }
        }
        data
    }

    #[test]
    fn balanced_corpus_splits_into_four_by_two() {
        let data = nested_blobs();
        let build = build_tree(&data, &[1, 4, 8], 33).unwrap();
        let tree = &build.tree;
        assert_eq!(tree.nodes.len(), 13);
        assert_eq!(tree.nodes[0].member_count, 400);
        for id in tree.level_ids(1) {
            let node = &tree.nodes[id];
            assert_eq!(node.member_count, 100, "parent {id}");
            assert_eq!(node.children.len(), 2, "parent {id}");
        }
        for id in tree.level_ids(2) {
            assert_eq!(tree.nodes[id].member_count, 50, "leaf {id}");
        }
    }

    #[test]
    fn tree_levels_nest() {
        let data = nested_blobs();
        let build = build_tree(&data, &[1, 4, 8], 5).unwrap();
        let (tree, assignments) = (&build.tree, &build.assignments);
        assert_eq!(assignments.len(), 3);
        for i in 0..data.len() {
            let leaf = assignments[2][i];
            let chain = tree.ancestors(leaf).unwrap();
            assert_eq!(chain.len(), 3);
            assert_eq!(chain[0], assignments[0][i]);
            assert_eq!(chain[1], assignments[1][i]);
            assert_eq!(chain[2], leaf);
        }
        tree.validate().unwrap();
    }

    #[test]
    fn tree_assigns_new_points_to_nearby_leaves() {
        let data = nested_blobs();
        let build = build_tree(&data, &[1, 4, 8], 5).unwrap();
        let tree = &build.tree;
        // A probe right on a sub-blob center lands in the leaf whose training
        // members came from that sub-blob.
        let probe = vec![43.0, 40.0];
        let leaf = tree.assign_finest(&probe);
        assert!(tree.level_ids(2).contains(&leaf));
        let d = dist2(&tree.nodes[leaf].center, &probe);
        assert!(d < 1.0, "probe landed {d} away");
        let chain = tree.ancestors(leaf).unwrap();
        assert_eq!(chain[0], 0);
        assert_eq!(tree.nodes[chain[1]].level, 1);
    }

    #[test]
    fn tree_build_is_deterministic() {
        let data = nested_blobs();
        let a = build_tree(&data, &[1, 4, 8], 9).unwrap();
        let b = build_tree(&data, &[1, 4, 8], 9).unwrap();
        assert_eq!(a.tree, b.tree);
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.tree.checksum(), b.tree.checksum());
    }

    #[test]
    fn tree_json_round_trips_and_checksum_tracks_content() {
        let data = nested_blobs();
        let tree = build_tree(&data, &[1, 2, 4], 2).unwrap().tree;
        let back = GranularityTree::from_json(&tree.to_json()).unwrap();
        assert_eq!(back, tree);
        assert_eq!(back.checksum(), tree.checksum());
        let mut tampered = tree.clone();
        tampered.nodes[0].center[0] += 1e-9;
        assert_ne!(tampered.checksum(), tree.checksum());
    }

    #[test]
    fn tree_rejects_bad_level_sizes() {
        let data = blob(&[0.0, 0.0], 10, 1.0, 1);
        for sizes in [vec![], vec![0], vec![4, 2], vec![1, 11]] {
            assert!(
                matches!(build_tree(&data, &sizes, 0), Err(ClusterError::InvalidLevelSizes(_))),
                "{sizes:?} accepted"
            );
        }
    }

    #[test]
    fn corrupt_tree_json_is_rejected() {
        let data = blob(&[0.0, 0.0], 10, 1.0, 1);
        let tree = build_tree(&data, &[1, 2], 0).unwrap().tree;
        let mut value: serde_json::Value = serde_json::from_str(&tree.to_json()).unwrap();
        value["nodes"][1]["parent"] = serde_json::Value::Null;
        let text = value.to_string();
        assert!(GranularityTree::from_json(&text).is_err());
        assert!(GranularityTree::from_json("{}").is_err());
    }
}
