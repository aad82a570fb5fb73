//! Cross-modality retrieval evaluation: gallery ranking by Euclidean
//! distance plus CMC, mAP, and mINP computed from exact match ranks.

use std::fmt;

use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which modality queries and which is the gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Visible queries against an infrared gallery.
    VisibleToInfrared,
    /// Infrared queries against a visible gallery.
    InfraredToVisible,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::VisibleToInfrared => "v2r",
            Direction::InfraredToVisible => "r2v",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "v2r" => Ok(Direction::VisibleToInfrared),
            "r2v" => Ok(Direction::InfraredToVisible),
            other => Err(Error::Argument(format!(
                "unknown direction '{other}', expected 'v2r' or 'r2v'"
            ))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Retrieval quality over one query/gallery direction.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport<S> {
    /// Full CMC curve; entry `r-1` is the fraction of evaluated queries
    /// whose first correct match appears at rank `<= r`.
    pub cmc: Vec<S>,
    pub map: S,
    pub minp: S,
    /// Queries that had at least one gallery match and were evaluated.
    pub num_queries: usize,
    /// Queries skipped because no gallery sample shares their identity.
    pub skipped: usize,
    pub direction: Direction,
}

impl<S: Scalar> RetrievalReport<S> {
    /// CMC at rank `r` (1-based); ranks beyond the gallery saturate at
    /// the end of the curve.
    pub fn cmc_at(&self, r: usize) -> S {
        assert!(r >= 1, "rank is 1-based");
        let idx = r.min(self.cmc.len()) - 1;
        self.cmc[idx]
    }
}

/// Gallery indices sorted by ascending Euclidean distance to the query;
/// exact distance ties break toward the lower gallery index.
pub fn rank_gallery<S: Scalar>(query: ArrayView1<S>, gallery: ArrayView2<S>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gallery.nrows()).collect();
    let d2: Vec<S> = gallery
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(query.iter())
                .map(|(&g, &q)| {
                    let d = g - q;
                    d * d
                })
                .sum()
        })
        .collect();
    order.sort_by(|&a, &b| d2[a].partial_cmp(&d2[b]).expect("finite distances").then(a.cmp(&b)));
    order
}

/// Ranks the whole gallery for every query row.
pub fn retrieve<S: Scalar>(
    queries: ArrayView2<S>,
    gallery: ArrayView2<S>,
) -> Result<Vec<Vec<usize>>> {
    if queries.nrows() == 0 || gallery.nrows() == 0 {
        return Err(Error::Argument("queries and gallery must be non-empty".into()));
    }
    if queries.ncols() != gallery.ncols() {
        return Err(Error::Argument(format!(
            "query dimension {} does not match gallery dimension {}",
            queries.ncols(),
            gallery.ncols()
        )));
    }
    if queries.iter().chain(gallery.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Argument("embeddings contain non-finite values".into()));
    }
    Ok(queries.rows().into_iter().map(|q| rank_gallery(q, gallery)).collect())
}

/// CMC/mAP/mINP from per-query gallery rankings.
///
/// A query with matches at 1-based ranks `r_1 < … < r_M` contributes
/// `AP = (1/M) Σ_m m/r_m` and `INP = M/r_M`; its first match advances
/// the CMC curve from rank `r_1` on. Queries without any match are
/// skipped and counted; if every query is matchless the evaluation
/// fails.
pub fn compute_metrics<S: Scalar>(
    rankings: &[Vec<usize>],
    query_ids: &[usize],
    gallery_ids: &[usize],
    direction: Direction,
) -> Result<RetrievalReport<S>> {
    if rankings.is_empty() {
        return Err(Error::Evaluation("no queries to evaluate".into()));
    }
    if rankings.len() != query_ids.len() {
        return Err(Error::Argument(format!(
            "{} rankings but {} query ids",
            rankings.len(),
            query_ids.len()
        )));
    }
    let g = gallery_ids.len();
    if g == 0 {
        return Err(Error::Argument("gallery is empty".into()));
    }
    for (q, ranking) in rankings.iter().enumerate() {
        if ranking.len() != g {
            return Err(Error::Argument(format!(
                "query {q} ranking has {} entries for a gallery of {g}",
                ranking.len()
            )));
        }
        let mut seen = vec![false; g];
        for &idx in ranking {
            if idx >= g || seen[idx] {
                return Err(Error::Argument(format!(
                    "query {q} ranking is not a permutation of the gallery"
                )));
            }
            seen[idx] = true;
        }
    }

    let mut cmc_counts = vec![0usize; g];
    let mut ap_sum = 0.0f64;
    let mut inp_sum = 0.0f64;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (ranking, &qid) in rankings.iter().zip(query_ids) {
        let mut matches = 0usize;
        let mut ap = 0.0f64;
        let mut first_rank = None;
        let mut last_rank = 0usize;
        for (pos, &idx) in ranking.iter().enumerate() {
            if gallery_ids[idx] == qid {
                matches += 1;
                let rank = pos + 1;
                ap += matches as f64 / rank as f64;
                if first_rank.is_none() {
                    first_rank = Some(rank);
                }
                last_rank = rank;
            }
        }
        match first_rank {
            None => skipped += 1,
            Some(first) => {
                evaluated += 1;
                ap_sum += ap / matches as f64;
                inp_sum += matches as f64 / last_rank as f64;
                cmc_counts[first - 1] += 1;
            }
        }
    }
    if evaluated == 0 {
        return Err(Error::Evaluation(
            "every query is matchless: no gallery sample shares any query identity".into(),
        ));
    }

    let mut cmc = Vec::with_capacity(g);
    let mut cum = 0usize;
    for count in cmc_counts {
        cum += count;
        cmc.push(S::real(cum as f64 / evaluated as f64));
    }
    Ok(RetrievalReport {
        cmc,
        map: S::real(ap_sum / evaluated as f64),
        minp: S::real(inp_sum / evaluated as f64),
        num_queries: evaluated,
        skipped,
        direction,
    })
}

/// Ranks and scores in one call.
pub fn evaluate<S: Scalar>(
    query_embeddings: ArrayView2<S>,
    gallery_embeddings: ArrayView2<S>,
    query_ids: &[usize],
    gallery_ids: &[usize],
    direction: Direction,
) -> Result<RetrievalReport<S>> {
    if query_embeddings.nrows() != query_ids.len() {
        return Err(Error::Argument(format!(
            "{} query embeddings but {} query ids",
            query_embeddings.nrows(),
            query_ids.len()
        )));
    }
    if gallery_embeddings.nrows() != gallery_ids.len() {
        return Err(Error::Argument(format!(
            "{} gallery embeddings but {} gallery ids",
            gallery_embeddings.nrows(),
            gallery_ids.len()
        )));
    }
    let rankings = retrieve(query_embeddings, gallery_embeddings)?;
    compute_metrics(&rankings, query_ids, gallery_ids, direction)
}

/// Report as a JSON object with exactly the keys
/// `r1,r5,r10,r20,map,minp,num_queries,direction`.
pub fn report_json<S: Scalar>(report: &RetrievalReport<S>) -> String {
    let mut obj = serde_json::Map::new();
    for (key, rank) in [("r1", 1), ("r5", 5), ("r10", 10), ("r20", 20)] {
        obj.insert(key.into(), serde_json::json!(report.cmc_at(rank).to_f64_lossy()));
    }
    obj.insert("map".into(), serde_json::json!(report.map.to_f64_lossy()));
    obj.insert("minp".into(), serde_json::json!(report.minp.to_f64_lossy()));
    obj.insert("num_queries".into(), serde_json::json!(report.num_queries));
    obj.insert("direction".into(), serde_json::json!(report.direction.as_str()));
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(obj))
        .expect("report serialization cannot fail");
    text.push('\n');
    text
}

/// Full CMC curve as `rank,cmc` CSV.
pub fn cmc_csv<S: Scalar>(report: &RetrievalReport<S>) -> String {
    let mut out = String::from("rank,cmc\n");
    for (i, &v) in report.cmc.iter().enumerate() {
        out.push_str(&format!("{},{:.16e}\n", i + 1, v.to_f64_lossy()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_duplicate_ranks_first() {
        let query = array![0.3, -0.7, 0.2];
        let gallery = array![[1.0, 0.0, 0.0], [0.3, -0.7, 0.2], [0.0, 1.0, 0.0]];
        let order = rank_gallery(query.view(), gallery.view());
        assert_eq!(order[0], 1);
    }

    #[test]
    fn one_dimensional_ranking_is_by_distance() {
        let queries = array![[0.9]];
        let gallery = array![[0.0], [1.0], [3.0]];
        let rankings = retrieve(queries.view(), gallery.view()).unwrap();
        assert_eq!(rankings[0], vec![1, 0, 2]);
    }

    #[test]
    fn distance_ties_break_toward_lower_gallery_index() {
        let queries = array![[0.0]];
        let gallery = array![[1.0], [-1.0], [1.0]];
        let rankings = retrieve(queries.view(), gallery.view()).unwrap();
        assert_eq!(rankings[0], vec![0, 1, 2]);
    }

    #[test]
    fn perfect_retrieval_scores_one_everywhere() {
        // Two queries, each with its matches strictly closest.
        let queries = array![[0.0, 0.0], [10.0, 0.0]];
        let gallery = array![[0.1, 0.0], [0.0, 0.1], [10.1, 0.0], [10.0, 0.1], [5.0, 5.0]];
        let qids = vec![1, 2];
        let gids = vec![1, 1, 2, 2, 3];
        let report: RetrievalReport<f64> = evaluate(
            queries.view(),
            gallery.view(),
            &qids,
            &gids,
            Direction::VisibleToInfrared,
        )
        .unwrap();
        assert!((report.cmc_at(1) - 1.0).abs() < 1e-15);
        assert!((report.map - 1.0).abs() < 1e-15);
        assert!((report.minp - 1.0).abs() < 1e-15);
        assert_eq!(report.num_queries, 2);
        assert_eq!(report.skipped, 0);
    }

    #[test]
    fn hand_worked_average_precision_and_inp() {
        // Matches at ranks 1 and 3 of a 3-deep gallery:
        // AP = (1/2)(1/1 + 2/3) = 5/6, INP = 2/3.
        let rankings = vec![vec![0, 1, 2]];
        let report: RetrievalReport<f64> =
            compute_metrics(&rankings, &[7], &[7, 3, 7], Direction::VisibleToInfrared).unwrap();
        assert!((report.map - 5.0 / 6.0).abs() < 1e-15);
        assert!((report.minp - 2.0 / 3.0).abs() < 1e-15);
        assert!((report.cmc_at(1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_match_the_counting_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        for _ in 0..60 {
            let nq = rng.gen_range(1..=20);
            let ng = rng.gen_range(2..=60);
            let d = rng.gen_range(2..=6);
            let num_ids = rng.gen_range(1..=6);
            let queries = Array2::from_shape_fn((nq, d), |_| rng.gen::<f64>());
            let gallery = Array2::from_shape_fn((ng, d), |_| rng.gen::<f64>());
            let mut qids: Vec<usize> = (0..nq).map(|_| rng.gen_range(0..num_ids)).collect();
            let mut gids: Vec<usize> = (0..ng).map(|_| rng.gen_range(0..num_ids)).collect();
            // Guarantee at least one evaluated query.
            qids[0] = 0;
            gids[0] = 0;

            let report: RetrievalReport<f64> = evaluate(
                queries.view(),
                gallery.view(),
                &qids,
                &gids,
                Direction::InfraredToVisible,
            )
            .unwrap();

            let mut distances = Array2::zeros((nq, ng));
            for i in 0..nq {
                for j in 0..ng {
                    let mut d2 = 0.0;
                    for t in 0..d {
                        let diff = queries[[i, t]] - gallery[[j, t]];
                        d2 += diff * diff;
                    }
                    distances[[i, j]] = d2.sqrt();
                }
            }
            let oracle = verify::brute_force_metrics(distances.view(), &qids, &gids);
            assert_eq!(report.num_queries, oracle.num_queries);
            assert_eq!(report.skipped, oracle.skipped);
            assert!((report.map - oracle.map).abs() < 1e-12);
            assert!((report.minp - oracle.minp).abs() < 1e-12);
            assert_eq!(report.cmc.len(), oracle.cmc.len());
            for (a, b) in report.cmc.iter().zip(&oracle.cmc) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gallery_permutation_does_not_change_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(401);
        let queries = Array2::from_shape_fn((8, 4), |_| rng.gen::<f64>());
        let gallery = Array2::from_shape_fn((30, 4), |_| rng.gen::<f64>());
        let qids: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let gids: Vec<usize> = (0..30).map(|i| i % 5).collect();
        let base: RetrievalReport<f64> = evaluate(
            queries.view(),
            gallery.view(),
            &qids,
            &gids,
            Direction::VisibleToInfrared,
        )
        .unwrap();

        // Reverse the gallery.
        let mut rev = Array2::zeros(gallery.raw_dim());
        let mut rev_ids = vec![0usize; 30];
        for i in 0..30 {
            rev.row_mut(i).assign(&gallery.row(29 - i));
            rev_ids[i] = gids[29 - i];
        }
        let permuted: RetrievalReport<f64> = evaluate(
            queries.view(),
            rev.view(),
            &qids,
            &rev_ids,
            Direction::VisibleToInfrared,
        )
        .unwrap();
        assert!((base.map - permuted.map).abs() < 1e-12);
        assert!((base.minp - permuted.minp).abs() < 1e-12);
        for (a, b) in base.cmc.iter().zip(&permuted.cmc) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_matchless_queries_is_an_evaluation_error() {
        let rankings = vec![vec![0, 1]];
        let err = compute_metrics::<f64>(&rankings, &[5], &[1, 2], Direction::VisibleToInfrared)
            .unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }

    #[test]
    fn matchless_queries_are_skipped_and_counted() {
        let rankings = vec![vec![0, 1], vec![1, 0]];
        let report: RetrievalReport<f64> =
            compute_metrics(&rankings, &[1, 9], &[1, 2], Direction::VisibleToInfrared).unwrap();
        assert_eq!(report.num_queries, 1);
        assert_eq!(report.skipped, 1);
    }

    #[test]
    fn cmc_curve_is_monotone_and_ends_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(402);
        let queries = Array2::from_shape_fn((10, 3), |_| rng.gen::<f64>());
        let gallery = Array2::from_shape_fn((40, 3), |_| rng.gen::<f64>());
        let qids: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let gids: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let report: RetrievalReport<f64> = evaluate(
            queries.view(),
            gallery.view(),
            &qids,
            &gids,
            Direction::InfraredToVisible,
        )
        .unwrap();
        for w in report.cmc.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!((report.cmc.last().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cmc_rank_lookup_saturates_past_the_gallery() {
        let rankings = vec![vec![0, 1, 2]];
        let report: RetrievalReport<f64> =
            compute_metrics(&rankings, &[7], &[7, 3, 7], Direction::VisibleToInfrared).unwrap();
        assert_eq!(report.cmc.len(), 3);
        assert_eq!(report.cmc_at(20), report.cmc_at(3));
    }

    #[test]
    fn report_json_has_exactly_the_contract_keys() {
        let rankings = vec![vec![0, 1, 2]];
        let report: RetrievalReport<f64> =
            compute_metrics(&rankings, &[7], &[7, 3, 7], Direction::VisibleToInfrared).unwrap();
        let text = report_json(&report);
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let obj = value.as_object().unwrap();
        let keys: Vec<&str> = obj.keys().map(|k| k.as_str()).collect();
        assert_eq!(keys, vec!["r1", "r5", "r10", "r20", "map", "minp", "num_queries", "direction"]);
        assert_eq!(obj["direction"], "v2r");
        assert_eq!(obj["num_queries"], 1);
        assert!((obj["map"].as_f64().unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn cmc_csv_lists_every_rank() {
        let rankings = vec![vec![0, 1, 2]];
        let report: RetrievalReport<f64> =
            compute_metrics(&rankings, &[7], &[7, 3, 7], Direction::VisibleToInfrared).unwrap();
        let csv = cmc_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "rank,cmc");
        assert!(lines[1].starts_with("1,"));
    }

    #[test]
    fn shape_and_permutation_validation() {
        let queries = array![[0.0, 0.0]];
        let gallery = array![[1.0]];
        assert!(retrieve(queries.view(), gallery.view()).is_err());

        let bad_rankings = vec![vec![0, 0]];
        assert!(compute_metrics::<f64>(&bad_rankings, &[1], &[1, 1], Direction::VisibleToInfrared)
            .is_err());
        let short = vec![vec![0]];
        assert!(
            compute_metrics::<f64>(&short, &[1], &[1, 1], Direction::VisibleToInfrared).is_err()
        );
    }

    #[test]
    fn direction_parsing_round_trips() {
        assert_eq!(Direction::parse("v2r").unwrap(), Direction::VisibleToInfrared);
        assert_eq!(Direction::parse("r2v").unwrap(), Direction::InfraredToVisible);
        assert!(Direction::parse("both").is_err());
        assert_eq!(Direction::VisibleToInfrared.to_string(), "v2r");
    }
}
