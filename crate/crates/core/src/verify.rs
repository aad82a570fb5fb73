//! Independent reference implementations used by tests and the self-test
//! command.
//!
//! Each oracle deliberately takes a different algorithmic route than the
//! production path it checks: the transport oracle scans a parameterized
//! family by grid search instead of matrix scaling, the permutation oracle
//! enumerates assignments exhaustively, and the retrieval oracle counts
//! ranks directly from unsorted distances. All oracles work in `f64`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Direct evaluation of the transport objective for the grid-search and
/// projection oracles (0·log 0 = 0; P floored at 1e-30).
fn objective_direct(q: ArrayView2<f64>, p: ArrayView2<f64>, lambda: f64) -> f64 {
    let (n, c) = q.dim();
    let prior = 1.0 / (n * c) as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..c {
            let qv = q[[i, j]];
            total -= qv * p[[i, j]].max(1e-30).ln();
            if qv > 0.0 {
                total += qv * (qv / prior).ln() / lambda;
            }
        }
    }
    total
}

/// Finds the optimal 2×2 transport plan by scanning the one-parameter
/// family of feasible plans.
///
/// With uniform marginals every feasible 2×2 plan has the form
/// `[[q, 1/2−q], [1/2−q, q]]` for q ∈ [0, 1/2]; the oracle evaluates the
/// objective at every grid point and returns the best plan found.
pub fn grid_search_2x2(p: ArrayView2<f64>, lambda: f64, step: f64) -> Array2<f64> {
    assert_eq!(p.dim(), (2, 2), "grid search oracle is 2x2 only");
    let mut best_q = 0.25;
    let mut best_obj = f64::INFINITY;
    let steps = (0.5 / step).round() as usize;
    for s in 0..=steps {
        let q = (s as f64 * step).min(0.5);
        let plan = ndarray::array![[q, 0.5 - q], [0.5 - q, q]];
        let obj = objective_direct(plan.view(), p, lambda);
        if obj < best_obj {
            best_obj = obj;
            best_q = q;
        }
    }
    ndarray::array![[best_q, 0.5 - best_q], [0.5 - best_q, best_q]]
}

/// Draws a random strictly positive matrix and projects it onto the
/// uniform transport marginals by plain alternating row/column scaling.
pub fn random_feasible_plan(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((n, c), |_| rng.gen::<f64>() + 0.1);
    let alpha = 1.0 / n as f64;
    let beta = 1.0 / c as f64;
    for _ in 0..500 {
        for mut row in m.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v * alpha / s);
        }
        for mut col in m.columns_mut() {
            let s = col.sum();
            col.mapv_inplace(|v| v * beta / s);
        }
    }
    m
}

/// Builds an N×N row-stochastic matrix whose row maxima form a random
/// permutation (distinct argmax per row and per column).
pub fn random_permutation_dominant(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut sigma: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        sigma.swap(i, j);
    }
    let mut p = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.01..0.1));
    for (i, &s) in sigma.iter().enumerate() {
        p[[i, s]] = rng.gen_range(0.5..0.9);
    }
    for mut row in p.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Exhaustively minimizes `Σ_i −log P_i,σ(i)` over all permutations σ
/// (Heap's algorithm); feasible only for small N.
pub fn brute_force_permutation_min(p: ArrayView2<f64>) -> Vec<usize> {
    let n = p.nrows();
    assert_eq!(n, p.ncols(), "permutation oracle needs a square matrix");
    assert!(n <= 9, "permutation oracle is exponential; N={n} is too large");
    let cost = |sigma: &[usize]| -> f64 {
        sigma
            .iter()
            .enumerate()
            .map(|(i, &j)| -p[[i, j]].max(1e-30).ln())
            .sum()
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = cost(&perm);
    let mut counters = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            let c = cost(&perm);
            if c < best_cost {
                best_cost = c;
                best = perm.clone();
            }
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    best
}

/// Retrieval metrics recomputed from unsorted distances by rank counting.
#[derive(Debug, Clone)]
pub struct BruteForceMetrics {
    /// CMC value at each rank 1..=gallery size.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub minp: f64,
    /// Queries with at least one gallery match.
    pub num_queries: usize,
    /// Queries excluded for having no match.
    pub skipped: usize,
}

/// Computes CMC/mAP/mINP without sorting: the rank of a gallery item is
/// one plus the number of items strictly closer, plus the number of
/// equally distant items with a lower index (mirroring the retrieval
/// tie-break).
pub fn brute_force_metrics(
    distances: ArrayView2<f64>,
    query_ids: &[usize],
    gallery_ids: &[usize],
) -> BruteForceMetrics {
    let (nq, ng) = distances.dim();
    assert_eq!(nq, query_ids.len());
    assert_eq!(ng, gallery_ids.len());
    let mut cmc = vec![0.0; ng];
    let mut map = 0.0;
    let mut minp = 0.0;
    let mut num_queries = 0;
    let mut skipped = 0;
    for q in 0..nq {
        let mut match_ranks = Vec::new();
        for g in 0..ng {
            if gallery_ids[g] != query_ids[q] {
                continue;
            }
            let d = distances[[q, g]];
            let mut rank = 1;
            for h in 0..ng {
                if distances[[q, h]] < d || (distances[[q, h]] == d && h < g) {
                    rank += 1;
                }
            }
            match_ranks.push(rank);
        }
        if match_ranks.is_empty() {
            skipped += 1;
            continue;
        }
        num_queries += 1;
        match_ranks.sort_unstable();
        let g_q = match_ranks.len() as f64;
        let ap: f64 = match_ranks
            .iter()
            .enumerate()
            .map(|(m, &r)| (m + 1) as f64 / r as f64)
            .sum::<f64>()
            / g_q;
        map += ap;
        minp += g_q / *match_ranks.last().unwrap() as f64;
        cmc[match_ranks[0] - 1] += 1.0;
    }
    let n = num_queries as f64;
    let mut acc = 0.0;
    for v in cmc.iter_mut() {
        acc += *v;
        *v = if num_queries > 0 { acc / n } else { 0.0 };
    }
    BruteForceMetrics {
        cmc,
        map: if num_queries > 0 { map / n } else { 0.0 },
        minp: if num_queries > 0 { minp / n } else { 0.0 },
        num_queries,
        skipped,
    }
}

/// Central finite differences of a scalar function, one coordinate at a
/// time: `(f(x+h·e_i) − f(x−h·e_i)) / 2h`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * step));
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grid_search_prefers_diagonal_for_diagonal_dominant_predictions() {
        let p = ndarray::array![[0.9_f64, 0.1], [0.2, 0.8]];
        let q = grid_search_2x2(p.view(), 5.0, 1e-6);
        assert!(q[[0, 0]] > 0.25, "diagonal mass should dominate, got {}", q[[0, 0]]);
        assert!((q[[0, 0]] + q[[0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn projected_plans_are_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_feasible_plan(6, 3, &mut rng);
        for row in q.rows() {
            assert!((row.sum() - 1.0 / 6.0).abs() < 1e-12);
        }
        for col in q.columns() {
            assert!((col.sum() - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_oracle_finds_planted_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let p = random_permutation_dominant(5, &mut rng);
            let best = brute_force_permutation_min(p.view());
            // The planted permutation maximizes each row entry, hence
            // minimizes the row's −log term independently.
            for (i, &j) in best.iter().enumerate() {
                let row_max = p.row(i).iter().cloned().fold(f64::MIN, f64::max);
                assert_eq!(p[[i, j]], row_max);
            }
        }
    }

    #[test]
    fn rank_counting_agrees_with_hand_example() {
        // One query, matches at ranks 1 and 3 of a 5-item gallery.
        let distances = ndarray::array![[0.1_f64, 0.2, 0.3, 0.4, 0.5]];
        let query_ids = [7usize];
        let gallery_ids = [7usize, 1, 7, 2, 3];
        let m = brute_force_metrics(distances.view(), &query_ids, &gallery_ids);
        assert!((m.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((m.minp - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.cmc[0] - 1.0).abs() < 1e-12);
        assert_eq!(m.num_queries, 1);
        assert_eq!(m.skipped, 0);
    }

    #[test]
    fn central_difference_matches_analytic_gradient_of_quadratic() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = [1.0, -2.0, 0.5];
        let g = central_difference(f, &x, 1e-5);
        for (gi, xi) in g.iter().zip(x.iter()) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }
}
