//! k-nearest-neighbor machinery and neighbor-consistency label
//! refinement.
//!
//! A sample's assigned cross-modality label is scored by its KL divergence
//! from the mean label of the sample's k nearest counterpart-modality
//! neighbors; samples scoring above τ are treated as noisy and their
//! labels are pulled toward the labels of nearby clean same-modality
//! samples with strength γ.

use ndarray::{Array1, Array2, ArrayView2};

use crate::data::squared_distance;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::simplex::{floor_renormalize, kl_divergence, KL_SMOOTHING_EPS};

/// Exact k-nearest-neighbor table of one query set against one reference
/// set.
#[derive(Debug, Clone)]
pub struct NeighborIndex<S> {
    /// N_query×k reference indices, nearest first.
    pub neighbor_ids: Array2<usize>,
    /// Matching Euclidean distances, ascending per row.
    pub distances: Array2<S>,
}

impl<S: Scalar> NeighborIndex<S> {
    /// Neighbors per query.
    pub fn k(&self) -> usize {
        self.neighbor_ids.ncols()
    }

    /// Checks per-row ascending distances and reference-index bounds.
    pub fn validate(&self, reference_len: usize) -> Result<()> {
        if self.neighbor_ids.dim() != self.distances.dim() {
            return Err(Error::Data("neighbor id and distance shapes differ".into()));
        }
        for (i, row) in self.distances.rows().into_iter().enumerate() {
            for w in row.as_slice().unwrap().windows(2) {
                if w[1] < w[0] {
                    return Err(Error::Data(format!("distances not ascending in row {i}")));
                }
            }
        }
        if self.neighbor_ids.iter().any(|&id| id >= reference_len) {
            return Err(Error::Data("neighbor index out of range".into()));
        }
        Ok(())
    }
}

/// Parameters of the label-refinement stage.
#[derive(Debug, Clone)]
pub struct NclrConfig<S> {
    /// Neighbor count k for both scoring and refinement.
    pub k: usize,
    /// Clean/noisy threshold τ; `+∞` disables the noisy branch entirely.
    pub tau: S,
    /// Refinement strength γ ∈ [0,1].
    pub gamma: S,
}

impl<S: Scalar> Default for NclrConfig<S> {
    fn default() -> Self {
        Self { k: 10, tau: S::real(1.0), gamma: S::real(0.25) }
    }
}

impl<S: Scalar> NclrConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("neighbor count k must be >= 1".into()));
        }
        if self.tau.is_nan() {
            return Err(Error::Config("tau must not be NaN".into()));
        }
        if !(self.gamma >= S::zero() && self.gamma <= S::one()) {
            return Err(Error::Config(format!("gamma must lie in [0,1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Inconsistency scores with their induced clean/noisy split.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanNoisyPartition<S> {
    /// Per-sample inconsistency score s(x_i) ≥ 0.
    pub scores: Vec<S>,
    /// `true` where the score is ≤ τ.
    pub clean_mask: Vec<bool>,
}

impl<S: Scalar> CleanNoisyPartition<S> {
    pub fn validate(&self, tau: S) -> Result<()> {
        if self.scores.len() != self.clean_mask.len() {
            return Err(Error::Data("score and mask lengths differ".into()));
        }
        for (i, (&s, &clean)) in self.scores.iter().zip(self.clean_mask.iter()).enumerate() {
            if s < S::zero() {
                return Err(Error::Data(format!("negative score at sample {i}")));
            }
            if clean != (s <= tau) {
                return Err(Error::Data(format!("mask contradicts threshold at sample {i}")));
            }
        }
        Ok(())
    }

    /// Fraction of samples marked clean.
    pub fn clean_fraction(&self) -> S {
        if self.clean_mask.is_empty() {
            return S::zero();
        }
        let clean = self.clean_mask.iter().filter(|&&c| c).count();
        S::real(clean as f64 / self.clean_mask.len() as f64)
    }
}

/// Exact k nearest neighbors of every query row among the reference rows.
///
/// Distances are Euclidean; ties break toward the lower reference index.
/// With `exclude_self` set, reference row i is removed from query i's
/// candidates (the caller declares the two sets identical).
pub fn knn<S: Scalar>(
    query: ArrayView2<S>,
    reference: ArrayView2<S>,
    k: usize,
    exclude_self: bool,
) -> Result<NeighborIndex<S>> {
    let nq = query.nrows();
    let nr = reference.nrows();
    if query.ncols() != reference.ncols() {
        return Err(Error::Argument(format!(
            "query dim {} does not match reference dim {}",
            query.ncols(),
            reference.ncols()
        )));
    }
    let available = if exclude_self { nr.saturating_sub(1) } else { nr };
    if k == 0 || k > available {
        return Err(Error::Argument(format!(
            "k must satisfy 1 <= k <= {available}, got {k}"
        )));
    }
    if exclude_self && nq != nr {
        return Err(Error::Argument(
            "exclude_self requires identical query and reference sets".into(),
        ));
    }

    let mut neighbor_ids = Array2::zeros((nq, k));
    let mut distances = Array2::zeros((nq, k));
    let mut scored: Vec<(S, usize)> = Vec::with_capacity(nr);
    for (i, q) in query.rows().into_iter().enumerate() {
        scored.clear();
        for (j, r) in reference.rows().into_iter().enumerate() {
            if exclude_self && j == i {
                continue;
            }
            scored.push((squared_distance(q, r), j));
        }
        scored.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        for (slot, &(d2, j)) in scored.iter().take(k).enumerate() {
            neighbor_ids[[i, slot]] = j;
            distances[[i, slot]] = d2.sqrt();
        }
    }
    Ok(NeighborIndex { neighbor_ids, distances })
}

/// Inconsistency score of each assigned label against the mean original
/// label of the sample's k counterpart-modality neighbors.
///
/// Both the assigned one-hot label and the neighbor mean are floored at
/// ε = 1e-12 and renormalized before the KL divergence, so scores are
/// always finite.
pub fn inconsistency_scores<S: Scalar>(
    assigned: ArrayView2<S>,
    counterpart_labels: ArrayView2<S>,
    index: &NeighborIndex<S>,
) -> Result<Vec<S>> {
    let n = assigned.nrows();
    let c = assigned.ncols();
    if counterpart_labels.ncols() != c {
        return Err(Error::Argument(format!(
            "assigned labels have {c} classes but counterpart labels have {}",
            counterpart_labels.ncols()
        )));
    }
    if index.neighbor_ids.nrows() != n {
        return Err(Error::Argument(format!(
            "neighbor index covers {} samples but {n} labels given",
            index.neighbor_ids.nrows()
        )));
    }
    index.validate(counterpart_labels.nrows())?;

    let eps = S::real(KL_SMOOTHING_EPS);
    let inv_k = S::one() / S::real(index.k() as f64);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut mean = Array1::<S>::zeros(c);
        for &j in index.neighbor_ids.row(i) {
            mean += &counterpart_labels.row(j);
        }
        mean.mapv_inplace(|v| v * inv_k);
        let p = floor_renormalize(assigned.row(i), eps);
        let m = floor_renormalize(mean.view(), eps);
        scores.push(kl_divergence(p.view(), m.view()));
    }
    Ok(scores)
}

/// Splits samples into clean (score ≤ τ) and noisy (score > τ).
pub fn split_clean_noisy<S: Scalar>(scores: Vec<S>, tau: S) -> CleanNoisyPartition<S> {
    let clean_mask = scores.iter().map(|&s| s <= tau).collect();
    CleanNoisyPartition { scores, clean_mask }
}

/// Bookkeeping from one refinement pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RefineStats {
    /// Samples left unchanged because they were clean.
    pub clean: usize,
    /// Noisy samples actually mixed toward clean neighbors.
    pub refined: usize,
    /// Noisy samples left unchanged for lack of any clean neighbor.
    pub empty_fallback: usize,
}

/// γ-mixes each noisy sample's label toward the mean assigned label of
/// its clean same-modality neighbors.
///
/// The neighbor set is the intersection of the k nearest same-modality
/// neighbors with the clean set; the mean runs over however many clean
/// neighbors were found. Clean samples, and noisy samples with no clean
/// neighbor, pass through unchanged (the latter counted in the stats).
pub fn refine_labels<S: Scalar>(
    assigned: ArrayView2<S>,
    partition: &CleanNoisyPartition<S>,
    same_modality_index: &NeighborIndex<S>,
    cfg: &NclrConfig<S>,
) -> Result<(Array2<S>, RefineStats)> {
    cfg.validate()?;
    let n = assigned.nrows();
    let c = assigned.ncols();
    if partition.clean_mask.len() != n {
        return Err(Error::Argument(format!(
            "partition covers {} samples but {n} labels given",
            partition.clean_mask.len()
        )));
    }
    if same_modality_index.neighbor_ids.nrows() != n {
        return Err(Error::Argument(format!(
            "neighbor index covers {} samples but {n} labels given",
            same_modality_index.neighbor_ids.nrows()
        )));
    }
    same_modality_index.validate(n)?;

    let mut refined = assigned.to_owned();
    let mut stats = RefineStats::default();
    let gamma = cfg.gamma;
    for i in 0..n {
        if partition.clean_mask[i] {
            stats.clean += 1;
            continue;
        }
        let clean_neighbors: Vec<usize> = same_modality_index
            .neighbor_ids
            .row(i)
            .iter()
            .copied()
            .filter(|&j| partition.clean_mask[j])
            .collect();
        if clean_neighbors.is_empty() {
            stats.empty_fallback += 1;
            continue;
        }
        let mut mean = Array1::<S>::zeros(c);
        for &j in &clean_neighbors {
            mean += &assigned.row(j);
        }
        mean.mapv_inplace(|v| v / S::real(clean_neighbors.len() as f64));
        let mut row = refined.row_mut(i);
        for (t, cell) in row.iter_mut().enumerate() {
            *cell = (S::one() - gamma) * *cell + gamma * mean[t];
        }
        stats.refined += 1;
    }
    Ok((refined, stats))
}

/// A fixed-width histogram of inconsistency scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHistogram<S> {
    /// Bin edges, length `bins + 1`, spanning `[0, upper]`.
    pub edges: Vec<S>,
    /// Sample count per bin; sums to the number of scores.
    pub counts: Vec<usize>,
}

impl<S: Scalar> ScoreHistogram<S> {
    /// Total number of samples binned.
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Upper edge used for score histograms: `max(2τ, observed max)`, falling
/// back to the observed range when τ is not finite, and to 1 when there
/// are no positive scores at all.
pub fn histogram_upper<S: Scalar>(scores: &[S], tau: S) -> S {
    let observed = scores.iter().cloned().fold(S::zero(), S::max);
    let two_tau = if tau.is_finite() { tau + tau } else { S::zero() };
    let upper = observed.max(two_tau);
    if upper > S::zero() {
        upper
    } else {
        S::one()
    }
}

/// Bins scores into `bins` uniform bins over `[0, upper]`; values at or
/// above `upper` land in the last bin.
pub fn score_histogram<S: Scalar>(scores: &[S], bins: usize, upper: S) -> Result<ScoreHistogram<S>> {
    if bins == 0 {
        return Err(Error::Argument("histogram needs at least one bin".into()));
    }
    if !(upper > S::zero()) {
        return Err(Error::Argument(format!("histogram upper edge must be positive, got {upper}")));
    }
    let width = upper / S::real(bins as f64);
    let edges: Vec<S> = (0..=bins).map(|b| width * S::real(b as f64)).collect();
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let mut bin = (s / width).to_f64_lossy().floor() as usize;
        if bin >= bins {
            bin = bins - 1;
        }
        counts[bin] += 1;
    }
    Ok(ScoreHistogram { edges, counts })
}
