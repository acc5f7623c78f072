//! Overlapped clustering: coverage sets, chains of cluster heads bridged by
//! shared devices, and per-cluster scheduling conflict graphs.
//!
//! A cluster is a head device plus everything inside its coverage radius.
//! Two clusters can exchange models without infrastructure when their
//! coverage zones share a device; that shared device becomes the bridge.
//! Candidates are therefore chains: head, bridge, head, bridge, head.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::distance_m;

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("no bridge candidate between {0} and {1}")]
    NoBridgeCandidate(usize, usize),
}

// ---------------------------------------------------------------------------
// Coverage
// ---------------------------------------------------------------------------

/// Symmetric neighbor sets under a fixed coverage radius. A device covers
/// itself, so its own data participates in any cluster it heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageMap {
    radius_m: f64,
    positions: Vec<(f64, f64)>,
    sets: Vec<BTreeSet<usize>>,
}

impl CoverageMap {
    pub fn new(positions: Vec<(f64, f64)>, radius_m: f64) -> Self {
        assert!(radius_m > 0.0, "coverage radius must be positive");
        let n = positions.len();
        let mut sets = vec![BTreeSet::new(); n];
        for i in 0..n {
            for j in 0..n {
                if distance_m(positions[i], positions[j]) <= radius_m {
                    sets[i].insert(j);
                }
            }
        }
        CoverageMap {
            radius_m,
            positions,
            sets,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn radius_m(&self) -> f64 {
        self.radius_m
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }

    pub fn position(&self, n: usize) -> (f64, f64) {
        self.positions[n]
    }

    /// Devices within the radius of `n`, including `n` itself.
    pub fn set(&self, n: usize) -> &BTreeSet<usize> {
        &self.sets[n]
    }

    pub fn covers(&self, n: usize, m: usize) -> bool {
        self.sets[n].contains(&m)
    }
}

pub fn coverage_sets(devices: &[crate::Device], radius_m: f64) -> CoverageMap {
    CoverageMap::new(devices.iter().map(|d| d.pos).collect(), radius_m)
}

// ---------------------------------------------------------------------------
// Cluster chains
// ---------------------------------------------------------------------------

/// A chain of cluster heads where every adjacent pair is bridged by exactly
/// one device lying in both coverage zones. Heads and bridges are disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterCandidate {
    /// Cluster heads in chain order.
    pub ch_chain: Vec<usize>,
    /// `bd_between[k]` bridges `ch_chain[k]` and `ch_chain[k+1]`.
    pub bd_between: Vec<usize>,
    /// Union of the heads' coverage sets.
    pub total_coverage: BTreeSet<usize>,
}

impl ClusterCandidate {
    pub fn num_clusters(&self) -> usize {
        self.ch_chain.len()
    }

    pub fn is_singleton(&self) -> bool {
        self.ch_chain.len() == 1
    }

    /// Heads and bridges together: the devices this candidate reserves.
    pub fn members(&self) -> BTreeSet<usize> {
        self.ch_chain
            .iter()
            .chain(self.bd_between.iter())
            .copied()
            .collect()
    }

    /// `(left head, right head, bridge)` for each adjacent pair.
    pub fn adjacent_pairs(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.bd_between.len())
            .map(move |k| (self.ch_chain[k], self.ch_chain[k + 1], self.bd_between[k]))
    }
}

/// Pick the bridge between two heads: the shared-coverage device whose
/// distances to the two heads are most nearly equal, lowest id on ties.
/// The heads themselves and everything in `exclude` are ineligible.
pub fn select_bd(
    ch_i: usize,
    ch_j: usize,
    coverage: &CoverageMap,
    exclude: &BTreeSet<usize>,
) -> Result<usize, TopologyError> {
    let mut best: Option<(f64, usize)> = None;
    // Ascending id order, so a strict improvement test breaks ties low.
    for &b in coverage.set(ch_i).intersection(coverage.set(ch_j)) {
        if b == ch_i || b == ch_j || exclude.contains(&b) {
            continue;
        }
        let di = distance_m(coverage.position(b), coverage.position(ch_i));
        let dj = distance_m(coverage.position(b), coverage.position(ch_j));
        let offset = (di - dj).abs();
        if best.is_none_or(|(bo, _)| offset < bo) {
            best = Some((offset, b));
        }
    }
    best.map(|(_, b)| b)
        .ok_or(TopologyError::NoBridgeCandidate(ch_i, ch_j))
}

/// Grow one chain from `seed`: extend at the tail with the device whose
/// coverage adds the most new ground, among those that still leave a free
/// bridge device in the tail overlap. Heads and used bridges never reappear
/// in the same chain.
fn grow_chain(coverage: &CoverageMap, seed: usize, max_chain_len: usize) -> ClusterCandidate {
    let mut chain = vec![seed];
    let mut bds = Vec::new();
    let mut total: BTreeSet<usize> = coverage.set(seed).clone();
    let mut reserved: BTreeSet<usize> = [seed].into();
    while chain.len() < max_chain_len {
        let tail = *chain.last().unwrap();
        let mut best: Option<(usize, usize, usize)> = None; // (new coverage, head, bridge)
        for m in 0..coverage.len() {
            if reserved.contains(&m) {
                continue;
            }
            let mut excl = reserved.clone();
            excl.insert(m);
            let Ok(bd) = select_bd(tail, m, coverage, &excl) else {
                continue;
            };
            let new_cov = coverage.set(m).difference(&total).count();
            // Ascending device order, so strict > keeps the lowest id on ties.
            if best.is_none_or(|(bc, _, _)| new_cov > bc) {
                best = Some((new_cov, m, bd));
            }
        }
        let Some((_, m, bd)) = best else { break };
        chain.push(m);
        bds.push(bd);
        total.extend(coverage.set(m).iter().copied());
        reserved.insert(m);
        reserved.insert(bd);
    }
    ClusterCandidate {
        ch_chain: chain,
        bd_between: bds,
        total_coverage: total,
    }
}

fn canonical_chain(candidate: &ClusterCandidate) -> Vec<usize> {
    let mut rev = candidate.ch_chain.clone();
    rev.reverse();
    if rev < candidate.ch_chain {
        rev
    } else {
        candidate.ch_chain.clone()
    }
}

/// Enumerate chain candidates by growing one chain from every seed device
/// and deduplicating up to orientation. Multi-head chains are the useful
/// candidates; bare singletons are returned only when no device pair can be
/// bridged at all, so dissemination-capable chains are never crowded out by
/// trivial one-cluster candidates.
pub fn enumerate_cluster_candidates(
    coverage: &CoverageMap,
    max_chain_len: usize,
) -> Vec<ClusterCandidate> {
    assert!(max_chain_len >= 1, "max_chain_len must be at least 1");
    let mut seen = BTreeSet::new();
    let mut chains = Vec::new();
    let mut singletons = Vec::new();
    for seed in 0..coverage.len() {
        let cand = grow_chain(coverage, seed, max_chain_len);
        if !seen.insert(canonical_chain(&cand)) {
            continue;
        }
        if cand.is_singleton() {
            singletons.push(cand);
        } else {
            chains.push(cand);
        }
    }
    if chains.is_empty() {
        singletons
    } else {
        chains
    }
}

// ---------------------------------------------------------------------------
// Conflict graphs
// ---------------------------------------------------------------------------

/// Scheduling conflict graph of one cluster. Vertices are (device, resource
/// block) pairs; an edge joins two vertices that cannot be picked together:
/// same device twice, or the same block handed to two devices.
#[derive(Debug, Clone)]
pub struct ConflictGraph {
    pub owner_ch: usize,
    pub vertices: Vec<(usize, usize)>,
    /// Per-vertex cost in seconds; the scheduler fills this before searching.
    pub weights: Vec<f64>,
    adj: Vec<Vec<usize>>,
    num_edges: usize,
}

impl ConflictGraph {
    pub fn from_vertices(owner_ch: usize, vertices: Vec<(usize, usize)>) -> Self {
        let n = vertices.len();
        let mut adj = vec![Vec::new(); n];
        let mut num_edges = 0;
        for a in 0..n {
            for b in (a + 1)..n {
                let (da, za) = vertices[a];
                let (db, zb) = vertices[b];
                if da == db || za == zb {
                    adj[a].push(b);
                    adj[b].push(a);
                    num_edges += 1;
                }
            }
        }
        ConflictGraph {
            owner_ch,
            vertices,
            weights: vec![0.0; n],
            adj,
            num_edges,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }
}

/// Full conflict graph of cluster `ch`: every covered device except the head
/// itself, crossed with every resource block.
pub fn build_conflict_graph(ch: usize, coverage: &CoverageMap, num_rrbs: usize) -> ConflictGraph {
    assert!(num_rrbs >= 1, "need at least one resource block");
    let mut vertices = Vec::new();
    for &n in coverage.set(ch) {
        if n == ch {
            continue;
        }
        for z in 0..num_rrbs {
            vertices.push((n, z));
        }
    }
    ConflictGraph::from_vertices(ch, vertices)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn line(spacing: f64, n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|i| (i as f64 * spacing, 0.0)).collect()
    }

    #[test]
    fn coverage_boundary_is_inclusive() {
        let map = CoverageMap::new(vec![(0.0, 0.0), (400.0, 0.0)], 400.0);
        assert!(map.covers(0, 1));
        assert!(map.covers(1, 0));
        let map = CoverageMap::new(vec![(0.0, 0.0), (401.0, 0.0)], 400.0);
        assert!(!map.covers(0, 1));
        assert!(!map.covers(1, 0));
    }

    #[test]
    fn coverage_includes_self() {
        let map = CoverageMap::new(vec![(3.0, 4.0)], 100.0);
        assert_eq!(map.set(0).len(), 1);
        assert!(map.covers(0, 0));
    }

    #[test]
    fn coverage_is_symmetric() {
        let pts = vec![(0.0, 0.0), (120.0, 50.0), (300.0, -40.0), (90.0, 90.0)];
        let map = CoverageMap::new(pts, 150.0);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(map.covers(i, j), map.covers(j, i));
            }
        }
    }

    #[test]
    fn select_bd_singleton_intersection() {
        // Heads at 0 and 2, only device 1 in both zones.
        let map = CoverageMap::new(line(90.0, 3), 100.0);
        let bd = select_bd(0, 2, &map, &BTreeSet::new()).unwrap();
        assert_eq!(bd, 1);
    }

    #[test]
    fn select_bd_prefers_the_middle() {
        // Heads 1.5R apart; candidates at 0.7R and 0.75R from the left head.
        // The 0.75R one sits dead center and wins.
        let r = 100.0;
        let pts = vec![(0.0, 0.0), (1.5 * r, 0.0), (0.7 * r, 0.0), (0.75 * r, 0.0)];
        let map = CoverageMap::new(pts, r);
        let bd = select_bd(0, 1, &map, &BTreeSet::new()).unwrap();
        assert_eq!(bd, 3);
    }

    #[test]
    fn select_bd_breaks_ties_by_lowest_id() {
        // Two candidates mirror-imaged about the midpoint: equal offsets.
        let r = 100.0;
        let pts = vec![(0.0, 0.0), (1.5 * r, 0.0), (0.7 * r, 0.0), (0.8 * r, 0.0)];
        let map = CoverageMap::new(pts, r);
        let bd = select_bd(0, 1, &map, &BTreeSet::new()).unwrap();
        assert_eq!(bd, 2);
    }

    #[test]
    fn select_bd_empty_intersection_errors() {
        let map = CoverageMap::new(vec![(0.0, 0.0), (1000.0, 0.0)], 100.0);
        assert_eq!(
            select_bd(0, 1, &map, &BTreeSet::new()),
            Err(TopologyError::NoBridgeCandidate(0, 1))
        );
    }

    #[test]
    fn select_bd_honors_exclusions() {
        let r = 100.0;
        let pts = vec![(0.0, 0.0), (1.5 * r, 0.0), (0.7 * r, 0.0), (0.75 * r, 0.0)];
        let map = CoverageMap::new(pts, r);
        let bd = select_bd(0, 1, &map, &[3].into()).unwrap();
        assert_eq!(bd, 2);
    }

    #[test]
    fn three_collinear_devices_form_a_bridged_pair() {
        // Spacing 0.9R: the outer pair's zones overlap exactly in the middle
        // device, which becomes the bridge of a two-head chain.
        let map = CoverageMap::new(line(90.0, 3), 100.0);
        let cands = enumerate_cluster_candidates(&map, 3);
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].ch_chain, vec![0, 2]);
        assert_eq!(cands[0].bd_between, vec![1]);
        assert_eq!(
            cands[0].total_coverage,
            [0, 1, 2].into_iter().collect::<BTreeSet<_>>()
        );
    }

    #[test]
    fn disjoint_devices_fall_back_to_singletons() {
        let map = CoverageMap::new(vec![(0.0, 0.0), (300.0, 0.0)], 100.0);
        let cands = enumerate_cluster_candidates(&map, 3);
        assert_eq!(cands.len(), 2);
        assert!(cands.iter().all(|c| c.is_singleton()));
    }

    #[test]
    fn single_device_yields_the_singleton_chain() {
        let map = CoverageMap::new(vec![(5.0, 5.0)], 100.0);
        let cands = enumerate_cluster_candidates(&map, 3);
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].ch_chain, vec![0]);
        assert!(cands[0].bd_between.is_empty());
    }

    #[test]
    fn five_in_line_grow_a_three_head_chain() {
        // Spacing 0.8R: heads 0, 2, 4 with bridges 1 and 3.
        let map = CoverageMap::new(line(80.0, 5), 100.0);
        let cands = enumerate_cluster_candidates(&map, 3);
        let long = cands
            .iter()
            .find(|c| c.ch_chain.len() == 3)
            .expect("three-head chain");
        assert_eq!(long.ch_chain, vec![0, 2, 4]);
        assert_eq!(long.bd_between, vec![1, 3]);
    }

    #[test]
    fn chain_length_cap_is_honored() {
        let map = CoverageMap::new(line(80.0, 5), 100.0);
        for cand in enumerate_cluster_candidates(&map, 2) {
            assert!(cand.ch_chain.len() <= 2);
        }
    }

    #[test]
    fn candidates_keep_heads_and_bridges_disjoint() {
        let map = CoverageMap::new(line(80.0, 9), 100.0);
        for cand in enumerate_cluster_candidates(&map, 4) {
            let heads: BTreeSet<_> = cand.ch_chain.iter().copied().collect();
            assert_eq!(heads.len(), cand.ch_chain.len());
            for (i, j, bd) in cand.adjacent_pairs() {
                assert!(!heads.contains(&bd));
                assert!(map.covers(i, bd) && map.covers(j, bd));
            }
            let bds: BTreeSet<_> = cand.bd_between.iter().copied().collect();
            assert_eq!(bds.len(), cand.bd_between.len());
        }
    }

    #[test]
    fn conflict_graph_two_devices_two_blocks() {
        // Head 0 covers devices 1 and 2: 4 vertices, 2 same-device edges
        // plus 2 same-block edges.
        let map = CoverageMap::new(vec![(0.0, 0.0), (50.0, 0.0), (0.0, 50.0)], 100.0);
        let g = build_conflict_graph(0, &map, 2);
        assert_eq!(g.num_vertices(), 4);
        assert_eq!(g.num_edges(), 4);
    }

    #[test]
    fn conflict_graph_single_vertex() {
        let map = CoverageMap::new(vec![(0.0, 0.0), (50.0, 0.0)], 100.0);
        let g = build_conflict_graph(0, &map, 1);
        assert_eq!(g.num_vertices(), 1);
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn conflict_graph_one_device_three_blocks_is_a_triangle() {
        let map = CoverageMap::new(vec![(0.0, 0.0), (50.0, 0.0)], 100.0);
        let g = build_conflict_graph(0, &map, 3);
        assert_eq!(g.num_vertices(), 3);
        assert_eq!(g.num_edges(), 3);
        for v in 0..3 {
            assert_eq!(g.neighbors(v).len(), 2);
        }
    }

    #[test]
    fn conflict_graph_excludes_the_head_itself() {
        let map = CoverageMap::new(vec![(0.0, 0.0), (50.0, 0.0), (0.0, 50.0)], 100.0);
        let g = build_conflict_graph(0, &map, 2);
        assert!(g.vertices.iter().all(|&(n, _)| n != 0));
    }
}
