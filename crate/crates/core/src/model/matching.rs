//! Minimum-cost assignment of target parts to decoder slots.
//!
//! Slot order carries no meaning, so training pairs each ground-truth part
//! with the slot that currently explains it best: cost(target, slot) =
//! semantic cross-entropy + (1 − mask IoU), minimized over one-to-one
//! assignments by the Hungarian algorithm.

/// Shortest-augmenting-path Hungarian solver. `cost` is rows × cols with
/// rows ≤ cols; returns the column assigned to each row, minimizing total
/// cost. Ties resolve deterministically (lowest column index).
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(
        cost.iter().all(|row| row.len() == m),
        "ragged cost matrix"
    );
    assert!(n <= m, "more rows ({n}) than columns ({m})");
    assert!(
        cost.iter().flatten().all(|c| c.is_finite()),
        "non-finite cost"
    );

    // 1-based potentials over rows (u) and columns (v); p[j] is the row
    // matched to column j (0 = free).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Unwind the augmenting path.
        while j0 != 0 {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }
    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(assignment.iter().all(|&j| j != usize::MAX));
    assignment
}

/// Result of pairing targets with decoder slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Slot matched to each target, by target index.
    pub node_for_target: Vec<usize>,
    /// Target matched to each slot (`None` = slot should predict absence).
    pub target_for_node: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl Matching {
    pub fn matched_count(&self) -> usize {
        self.node_for_target.len()
    }
}

/// Assigns every target (row) a distinct slot (column) at minimum total cost;
/// leftover slots get existence target 0.
pub fn match_children(cost: &[Vec<f64>], node_count: usize) -> Matching {
    let node_for_target = hungarian(cost);
    let mut target_for_node = vec![None; node_count];
    for (t, &k) in node_for_target.iter().enumerate() {
        target_for_node[k] = Some(t);
    }
    let total_cost = node_for_target
        .iter()
        .enumerate()
        .map(|(t, &k)| cost[t][k])
        .sum();
    Matching {
        node_for_target,
        target_for_node,
        total_cost,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let m = cost[0].len();
        let mut cols: Vec<usize> = (0..m).collect();
        let mut best = f64::INFINITY;
        // Heap's algorithm over column permutations; first n entries pair
        // with rows. Fine for the ≤6×6 sizes used here.
        fn permute(cols: &mut Vec<usize>, k: usize, cost: &[Vec<f64>], n: usize, best: &mut f64) {
            if k == cols.len() {
                let total: f64 = (0..n).map(|i| cost[i][cols[i]]).sum();
                if total < *best {
                    *best = total;
                }
                return;
            }
            for i in k..cols.len() {
                cols.swap(k, i);
                permute(cols, k + 1, cost, n, best);
                cols.swap(k, i);
            }
        }
        permute(&mut cols, 0, cost, n, &mut best);
        best
    }

    #[test]
    fn dominant_diagonal_gives_identity() {
        let cost = vec![vec![0.1, 5.0], vec![5.0, 0.1]];
        assert_eq!(hungarian(&cost), vec![0, 1]);
    }

    #[test]
    fn three_targets_ten_nodes_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cost: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..10).map(|_| rng.gen_range(0.0..2.0)).collect())
            .collect();
        let m = match_children(&cost, 10);
        assert_eq!(m.node_for_target.len(), 3);
        assert_eq!(
            m.target_for_node.iter().filter(|t| t.is_some()).count(),
            3
        );
        assert_eq!(
            m.target_for_node.iter().filter(|t| t.is_none()).count(),
            7
        );
        // Distinct slots.
        let mut slots = m.node_for_target.clone();
        slots.sort_unstable();
        slots.dedup();
        assert_eq!(slots.len(), 3);
    }

    #[test]
    fn square_5x5_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let cost: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..5).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();
            let m = match_children(&cost, 5);
            let brute = brute_force_min(&cost);
            assert!(
                (m.total_cost - brute).abs() < 1e-12,
                "hungarian {} vs brute {brute}",
                m.total_cost
            );
        }
    }

    #[test]
    fn rectangular_up_to_six_never_beaten_by_any_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..15 {
            let rows = rng.gen_range(1..=4usize);
            let cols = rng.gen_range(rows..=6usize);
            let cost: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..3.0)).collect())
                .collect();
            let m = match_children(&cost, cols);
            let brute = brute_force_min(&cost);
            assert!((m.total_cost - brute).abs() < 1e-12);
        }
    }
}
