//! Brute-force reference solvers. These deliberately share no code with the
//! greedy scheduler or the closed-form clock rule they are used to check:
//! the independent-set oracle enumerates subsets, the clock oracle scans a
//! dense grid.

/// Exhaustive minimum-weight maximal independent set on a small graph.
/// Vertices are `0..weights.len()`; `edges` lists unordered conflicts.
/// Returns the best vertex set and its total weight. Panics above 20
/// vertices, where enumeration stops being a sane oracle.
pub fn min_weight_maximal_is(weights: &[f64], edges: &[(usize, usize)]) -> (Vec<usize>, f64) {
    let n = weights.len();
    assert!(n <= 20, "exhaustive oracle is for small graphs");
    let mut adj = vec![0u32; n];
    for &(a, b) in edges {
        assert!(a != b && a < n && b < n, "bad edge ({a}, {b})");
        adj[a] |= 1 << b;
        adj[b] |= 1 << a;
    }

    let independent = |mask: u32| -> bool {
        let mut m = mask;
        while m != 0 {
            let v = m.trailing_zeros() as usize;
            m &= m - 1;
            if adj[v] & mask != 0 {
                return false;
            }
        }
        true
    };
    // Maximal means every remaining vertex conflicts with the set.
    let maximal = |mask: u32| -> bool {
        for (v, &a) in adj.iter().enumerate() {
            if mask & (1 << v) == 0 && a & mask == 0 {
                return false;
            }
        }
        true
    };

    let mut best_mask = 0u32;
    let mut best_weight = f64::INFINITY;
    for mask in 0..(1u32 << n) {
        if !independent(mask) || !maximal(mask) {
            continue;
        }
        let weight: f64 = (0..n)
            .filter(|v| mask & (1 << v) != 0)
            .map(|v| weights[v])
            .sum();
        if weight < best_weight {
            best_weight = weight;
            best_mask = mask;
        }
    }
    let set: Vec<usize> = (0..n).filter(|v| best_mask & (1 << v) != 0).collect();
    (set, best_weight)
}

/// Check a vertex set against the same graph: pairwise non-adjacent and
/// not extendable.
pub fn is_independent_and_maximal(
    set: &[usize],
    num_vertices: usize,
    edges: &[(usize, usize)],
) -> (bool, bool) {
    let chosen: std::collections::BTreeSet<usize> = set.iter().copied().collect();
    let conflict = |v: usize| {
        edges
            .iter()
            .any(|&(a, b)| (a == v && chosen.contains(&b)) || (b == v && chosen.contains(&a)))
    };
    let independent = set.iter().all(|&v| !conflict(v));
    let maximal = (0..num_vertices).all(|v| chosen.contains(&v) || conflict(v));
    (independent, maximal)
}

/// Grid argmin of the round compute energy T_l·Q·D·α·f² over the clocks in
/// `[f_min, f_max]` that still meet the budget, i.e. f ≥ f_hat. The grid has
/// `points` nodes; when even f_max misses the budget the boundary point is
/// returned, mirroring the clamp in the closed form. The argument list
/// mirrors the raw parameter tuple on purpose.
#[allow(clippy::too_many_arguments)]
pub fn grid_min_energy_freq(
    f_hat: f64,
    f_min: f64,
    f_max: f64,
    local_iters: usize,
    proc_density: f64,
    num_samples: usize,
    alpha: f64,
    points: usize,
) -> f64 {
    assert!(f_min > 0.0 && f_min <= f_max && points >= 2);
    let energy = |f: f64| {
        local_iters as f64 * proc_density * num_samples as f64 * alpha * f * f
    };
    let step = (f_max - f_min) / (points - 1) as f64;
    let mut best_f = f_max;
    let mut best_e = f64::INFINITY;
    for i in 0..points {
        let f = f_min + step * i as f64;
        if f < f_hat && i + 1 < points {
            continue;
        }
        let e = energy(f);
        if e < best_e {
            best_e = e;
            best_f = f;
        }
    }
    best_f
}

// ---------------------------------------------------------------------------
// Suite drivers
// ---------------------------------------------------------------------------

use eocd_core::resource;
use eocd_core::scheduler::mwis_greedy;
use eocd_core::topology::ConflictGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
pub struct MwisSuiteResult {
    pub graphs: usize,
    pub mean_ratio: f64,
    pub worst_ratio: f64,
    pub failures: Vec<String>,
}

/// Run the greedy block scheduler against exhaustive search on random
/// conflict graphs of at most 12 vertices. The oracle gets the same vertex
/// list but derives the conflicts itself from the same-device / same-block
/// rule rather than trusting the graph structure under test.
pub fn mwis_oracle_suite(num_graphs: usize, seed: u64) -> MwisSuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(num_graphs);
    let mut failures = Vec::new();
    for case in 0..num_graphs {
        let nd = rng.gen_range(2..=5);
        let nz = rng.gen_range(2..=5);
        let mut cells: Vec<(usize, usize)> = (0..nd)
            .flat_map(|d| (0..nz).map(move |z| (d, z)))
            .collect();
        // Knuth shuffle with the suite's own rng keeps cases reproducible.
        for i in (1..cells.len()).rev() {
            cells.swap(i, rng.gen_range(0..=i));
        }
        let count = rng.gen_range(3..=12.min(cells.len()));
        let mut vertices = cells[..count].to_vec();
        vertices.sort_unstable();
        let weights: Vec<f64> = (0..count).map(|_| rng.gen_range(0.1..10.0)).collect();

        let mut edges = Vec::new();
        for i in 0..count {
            for j in (i + 1)..count {
                if vertices[i].0 == vertices[j].0 || vertices[i].1 == vertices[j].1 {
                    edges.push((i, j));
                }
            }
        }

        let mut graph = ConflictGraph::from_vertices(usize::MAX, vertices.clone());
        graph.weights = weights.clone();
        let picked = mwis_greedy(&graph);
        let (independent, maximal) = is_independent_and_maximal(&picked, count, &edges);
        if !independent || !maximal {
            failures.push(format!(
                "case {case}: greedy set {picked:?} independent={independent} maximal={maximal}"
            ));
            continue;
        }
        let greedy_weight: f64 = picked.iter().map(|&v| weights[v]).sum();
        let (_, best_weight) = min_weight_maximal_is(&weights, &edges);
        if greedy_weight < best_weight - 1e-9 {
            failures.push(format!(
                "case {case}: greedy {greedy_weight} beat the exhaustive optimum {best_weight}"
            ));
            continue;
        }
        ratios.push(greedy_weight / best_weight);
    }
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    let worst_ratio = ratios.iter().copied().fold(1.0, f64::max);
    MwisSuiteResult {
        graphs: num_graphs,
        mean_ratio,
        worst_ratio,
        failures,
    }
}

#[derive(Debug)]
pub struct ClockSuiteResult {
    pub tuples: usize,
    pub worst_gap_steps: f64,
    pub failures: Vec<String>,
}

/// Check the closed-form clock rule against a dense grid scan of the
/// compute energy over the feasible interval, on random parameter tuples
/// spread across all three clamp branches.
pub fn clock_oracle_suite(num_tuples: usize, seed: u64) -> ClockSuiteResult {
    const GRID_POINTS: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_gap = 0.0_f64;
    let mut failures = Vec::new();
    for case in 0..num_tuples {
        let f_min = 10f64.powf(rng.gen_range(4.0..7.0));
        let f_max = f_min * 10f64.powf(rng.gen_range(0.5..3.5));
        let f_hat = match case % 3 {
            0 => f_min * rng.gen_range(0.01..1.0),
            1 => rng.gen_range(f_min..f_max),
            _ => f_max * rng.gen_range(1.0..100.0),
        };
        let local_iters = rng.gen_range(1..=10);
        let proc_density = rng.gen_range(100.0..1000.0);
        let num_samples = rng.gen_range(1..=500);
        let alpha = 1e-28;

        let closed = match resource::closed_form_freq(f_hat, f_min, f_max) {
            Ok(f) => f,
            Err(e) => {
                failures.push(format!("case {case}: closed form failed: {e}"));
                continue;
            }
        };
        let grid = grid_min_energy_freq(
            f_hat,
            f_min,
            f_max,
            local_iters,
            proc_density,
            num_samples,
            alpha,
            GRID_POINTS,
        );
        let step = (f_max - f_min) / (GRID_POINTS - 1) as f64;
        let gap = (closed - grid).abs() / step;
        worst_gap = worst_gap.max(gap);
        if gap > 1.0 + 1e-9 {
            failures.push(format!(
                "case {case}: closed {closed} vs grid {grid} is {gap:.2} steps apart \
                 (f_hat {f_hat}, bounds [{f_min}, {f_max}])"
            ));
        }
    }
    ClockSuiteResult {
        tuples: num_tuples,
        worst_gap_steps: worst_gap,
        failures,
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_prefers_the_lightest_vertex() {
        let (set, w) = min_weight_maximal_is(&[5.0, 1.0, 3.0], &[(0, 1), (1, 2), (0, 2)]);
        assert_eq!(set, vec![1]);
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn path_graph_picks_the_cheap_endpoints() {
        // 0-1-2: maximal independent sets are {1} and {0, 2}.
        let (set, w) = min_weight_maximal_is(&[1.0, 10.0, 1.0], &[(0, 1), (1, 2)]);
        assert_eq!(set, vec![0, 2]);
        assert!((w - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singleton_middle_wins_when_cheap() {
        let (set, w) = min_weight_maximal_is(&[5.0, 1.0, 5.0], &[(0, 1), (1, 2)]);
        assert_eq!(set, vec![1]);
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_graph_takes_everything() {
        let (set, w) = min_weight_maximal_is(&[2.0, 3.0], &[]);
        assert_eq!(set, vec![0, 1]);
        assert!((w - 5.0).abs() < 1e-12);
    }

    #[test]
    fn maximality_checker_agrees() {
        let edges = [(0, 1), (1, 2)];
        let (ok_ind, ok_max) = is_independent_and_maximal(&[0, 2], 3, &edges);
        assert!(ok_ind && ok_max);
        let (ok_ind, ok_max) = is_independent_and_maximal(&[0], 3, &edges);
        assert!(ok_ind && !ok_max);
        let (ok_ind, _) = is_independent_and_maximal(&[0, 1], 3, &edges);
        assert!(!ok_ind);
    }

    #[test]
    fn grid_lands_on_the_budget_clock() {
        // Energy grows with f, so the grid argmin is the smallest feasible
        // clock: f_hat inside the interval, f_min below it, f_max when the
        // budget is out of reach.
        let f = grid_min_energy_freq(5.0e5, 3.0e5, 1.0e9, 1, 500.0, 200, 1e-28, 10_000);
        assert!((f - 5.0e5).abs() <= (1.0e9 - 3.0e5) / 9_999.0);
        let f = grid_min_energy_freq(1.0e5, 3.0e5, 1.0e9, 1, 500.0, 200, 1e-28, 10_000);
        assert_eq!(f, 3.0e5);
        let f = grid_min_energy_freq(2.0e9, 3.0e5, 1.0e9, 1, 500.0, 200, 1e-28, 10_000);
        assert_eq!(f, 1.0e9);
    }
}
