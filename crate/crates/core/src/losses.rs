//! Loss stack: soft cross-entropy, batch-hard triplet, the per-branch
//! collaborative losses, the cross-modality neighbor consistency penalty,
//! and the stage totals.
//!
//! Every loss returns its value together with analytic gradients with
//! respect to its direct inputs — logits for classification/KL terms
//! (expressed through the already-softmaxed probabilities) and embeddings
//! for the triplet term. Probability floors guard the logarithms; the
//! gradients treat the floors as inactive, which is exact everywhere the
//! floors do not bind.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::simplex::PROB_FLOOR;

/// A scalar loss with the gradient for the single tensor it differentiates.
#[derive(Debug, Clone)]
pub struct LossValue<S> {
    pub value: S,
    /// For classification terms: gradient w.r.t. logits. For the triplet
    /// term: gradient w.r.t. embeddings.
    pub grad: Array2<S>,
}

/// One modality's ReID loss (triplet + cross-entropy) with both gradients.
#[derive(Debug, Clone)]
pub struct ReidLoss<S> {
    pub value: S,
    /// Gradient w.r.t. this modality's logits under its own head.
    pub grad_logits: Array2<S>,
    /// Gradient w.r.t. this modality's embeddings.
    pub grad_embeddings: Array2<S>,
}

/// One branch's collaborative loss: cross-modality CE plus the branch's
/// own ReID loss.
#[derive(Debug, Clone)]
pub struct BranchLoss<S> {
    pub value: S,
    /// Gradient w.r.t. the counterpart samples' logits under this head.
    pub grad_cross_logits: Array2<S>,
    /// The own-modality component with its gradients.
    pub reid: ReidLoss<S>,
}

/// The neighbor-consistency penalty with gradients for both prediction
/// sets (the own samples and their in-batch counterpart neighbors).
#[derive(Debug, Clone)]
pub struct CncrLoss<S> {
    pub value: S,
    /// Gradient w.r.t. the own samples' logits.
    pub grad_own_logits: Array2<S>,
    /// Gradient w.r.t. the counterpart samples' logits (accumulated over
    /// every neighbor role a counterpart sample plays).
    pub grad_counterpart_logits: Array2<S>,
    /// Samples skipped for having no in-batch neighbor; they contribute
    /// zero while the mean still divides by the full batch size.
    pub skipped: usize,
}

/// Loss weighting knobs.
#[derive(Debug, Clone)]
pub struct LossWeights<S> {
    /// α multiplying the consistency penalty in the stage-2 total.
    pub alpha_cncr: S,
    /// Margin of the batch-hard triplet hinge.
    pub triplet_margin: S,
}

impl<S: Scalar> Default for LossWeights<S> {
    fn default() -> Self {
        Self { alpha_cncr: S::real(0.3), triplet_margin: S::real(0.3) }
    }
}

impl<S: Scalar> LossWeights<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_cncr >= S::zero()) || !self.alpha_cncr.is_finite() {
            return Err(Error::Config(format!("alpha_cncr must be >= 0, got {}", self.alpha_cncr)));
        }
        if !(self.triplet_margin >= S::zero()) || !self.triplet_margin.is_finite() {
            return Err(Error::Config(format!(
                "triplet_margin must be >= 0, got {}",
                self.triplet_margin
            )));
        }
        Ok(())
    }
}

/// Soft cross-entropy `−(1/B)·Σ t·log p` with the gradient w.r.t. logits,
/// `(p − t)/B`. An empty batch contributes zero.
pub fn cross_entropy_soft<S: Scalar>(
    pred_probs: ArrayView2<S>,
    targets: ArrayView2<S>,
) -> Result<LossValue<S>> {
    if pred_probs.dim() != targets.dim() {
        return Err(Error::Argument(format!(
            "prediction shape {:?} does not match target shape {:?}",
            pred_probs.dim(),
            targets.dim()
        )));
    }
    let b = pred_probs.nrows();
    if b == 0 {
        return Ok(LossValue { value: S::zero(), grad: Array2::zeros(pred_probs.raw_dim()) });
    }
    let floor = S::real(PROB_FLOOR);
    let inv_b = S::one() / S::real(b as f64);
    let mut value = S::zero();
    for (&p, &t) in pred_probs.iter().zip(targets.iter()) {
        if t > S::zero() {
            value = value - t * p.max(floor).ln();
        }
    }
    value = value * inv_b;
    let grad = Array2::from_shape_fn(pred_probs.raw_dim(), |(i, j)| {
        (pred_probs[[i, j]] - targets[[i, j]]) * inv_b
    });
    Ok(LossValue { value, grad })
}

/// Batch-hard triplet loss over Euclidean distances.
///
/// Per anchor the hinge compares the farthest same-label sample against
/// the closest different-label sample; anchors lacking either are
/// excluded from the mean. The gradient is the subgradient of the active
/// hinges (zero at inactive hinges and at coincident points).
pub fn triplet_batch_hard<S: Scalar>(
    embeddings: ArrayView2<S>,
    labels: &[usize],
    margin: S,
) -> Result<LossValue<S>> {
    let b = embeddings.nrows();
    if b < 2 {
        return Err(Error::Argument(format!("triplet loss needs a batch of >= 2, got {b}")));
    }
    if labels.len() != b {
        return Err(Error::Argument(format!(
            "batch has {b} embeddings but {} labels",
            labels.len()
        )));
    }

    let mut dist = Array2::<S>::zeros((b, b));
    for i in 0..b {
        for j in (i + 1)..b {
            let d = crate::data::squared_distance(embeddings.row(i), embeddings.row(j)).sqrt();
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }

    let mut grad = Array2::<S>::zeros(embeddings.raw_dim());
    let mut total = S::zero();
    let mut valid = 0usize;
    for a in 0..b {
        let mut hardest_pos: Option<(usize, S)> = None;
        let mut hardest_neg: Option<(usize, S)> = None;
        for o in 0..b {
            if o == a {
                continue;
            }
            let d = dist[[a, o]];
            if labels[o] == labels[a] {
                if hardest_pos.map_or(true, |(_, best)| d > best) {
                    hardest_pos = Some((o, d));
                }
            } else if hardest_neg.map_or(true, |(_, best)| d < best) {
                hardest_neg = Some((o, d));
            }
        }
        let (Some((p, d_ap)), Some((n, d_an))) = (hardest_pos, hardest_neg) else {
            continue;
        };
        valid += 1;
        let hinge = d_ap - d_an + margin;
        if hinge <= S::zero() {
            continue;
        }
        total = total + hinge;
        // d‖e_a − e_o‖/de = (e_a − e_o)/d, applied with +1 for the positive
        // distance and −1 for the negative distance.
        if d_ap > S::zero() {
            for t in 0..embeddings.ncols() {
                let dir = (embeddings[[a, t]] - embeddings[[p, t]]) / d_ap;
                grad[[a, t]] += dir;
                grad[[p, t]] -= dir;
            }
        }
        if d_an > S::zero() {
            for t in 0..embeddings.ncols() {
                let dir = (embeddings[[a, t]] - embeddings[[n, t]]) / d_an;
                grad[[a, t]] -= dir;
                grad[[n, t]] += dir;
            }
        }
    }

    if valid == 0 {
        return Ok(LossValue { value: S::zero(), grad });
    }
    let inv = S::one() / S::real(valid as f64);
    grad.mapv_inplace(|g| g * inv);
    Ok(LossValue { value: total * inv, grad })
}

/// One modality's ReID loss: batch-hard triplet plus cross-entropy against
/// one-hot pseudo-labels.
pub fn reid_loss<S: Scalar>(
    embeddings: ArrayView2<S>,
    pred_probs: ArrayView2<S>,
    hard_labels: &[usize],
    margin: S,
) -> Result<ReidLoss<S>> {
    let c = pred_probs.ncols();
    if let Some(&bad) = hard_labels.iter().find(|&&l| l >= c) {
        return Err(Error::Argument(format!("label {bad} out of range for {c} classes")));
    }
    let mut targets = Array2::<S>::zeros(pred_probs.raw_dim());
    for (i, &l) in hard_labels.iter().enumerate() {
        targets[[i, l]] = S::one();
    }
    let ce = cross_entropy_soft(pred_probs, targets.view())?;
    let tri = triplet_batch_hard(embeddings, hard_labels, margin)?;
    Ok(ReidLoss {
        value: ce.value + tri.value,
        grad_logits: ce.grad,
        grad_embeddings: tri.grad,
    })
}

/// One branch's collaborative loss: soft CE of the counterpart samples
/// under this branch's head (against their assigned, possibly refined,
/// labels) plus the branch's own ReID loss.
pub fn collaborative_loss<S: Scalar>(
    cross_probs: ArrayView2<S>,
    cross_targets: ArrayView2<S>,
    own_reid: ReidLoss<S>,
) -> Result<BranchLoss<S>> {
    let ce = cross_entropy_soft(cross_probs, cross_targets)?;
    Ok(BranchLoss {
        value: ce.value + own_reid.value,
        grad_cross_logits: ce.grad,
        reid: own_reid,
    })
}

/// Cross-modality neighbor consistency penalty.
///
/// For each own-modality sample i with in-batch counterpart neighbors
/// `neighbors[i]`, penalizes `KL(p_i ‖ mean of neighbor predictions)`
/// where both prediction sets come from the same classifier head.
/// Samples with an empty neighbor list are skipped (counted); the mean
/// divides by the full batch size either way. Gradients flow into both
/// prediction sets.
pub fn cncr_loss<S: Scalar>(
    own_probs: ArrayView2<S>,
    counterpart_probs: ArrayView2<S>,
    neighbors: &[Vec<usize>],
) -> Result<CncrLoss<S>> {
    let b1 = own_probs.nrows();
    let c = own_probs.ncols();
    if counterpart_probs.ncols() != c {
        return Err(Error::Argument(format!(
            "own and counterpart predictions disagree on class count: {c} vs {}",
            counterpart_probs.ncols()
        )));
    }
    if neighbors.len() != b1 {
        return Err(Error::Argument(format!(
            "{b1} samples but {} neighbor lists",
            neighbors.len()
        )));
    }
    if let Some(&bad) = neighbors.iter().flatten().find(|&&j| j >= counterpart_probs.nrows()) {
        return Err(Error::Argument(format!("neighbor index {bad} out of range")));
    }
    if b1 == 0 {
        return Ok(CncrLoss {
            value: S::zero(),
            grad_own_logits: Array2::zeros(own_probs.raw_dim()),
            grad_counterpart_logits: Array2::zeros(counterpart_probs.raw_dim()),
            skipped: 0,
        });
    }

    let floor = S::real(PROB_FLOOR);
    let inv_b1 = S::one() / S::real(b1 as f64);
    let mut value = S::zero();
    let mut grad_own = Array2::<S>::zeros(own_probs.raw_dim());
    let mut grad_cp = Array2::<S>::zeros(counterpart_probs.raw_dim());
    let mut skipped = 0usize;

    for (i, nbrs) in neighbors.iter().enumerate() {
        if nbrs.is_empty() {
            skipped += 1;
            continue;
        }
        let inv_k = S::one() / S::real(nbrs.len() as f64);
        let mut mean = Array1::<S>::zeros(c);
        for &j in nbrs {
            mean += &counterpart_probs.row(j);
        }
        mean.mapv_inplace(|v| v * inv_k);

        // KL(p ‖ m) and its logits gradients, via the softmax identity
        // d/dz_a = p_a·(g_a − Σ g·p) for upstream g = dKL/dp.
        let mut kl = S::zero();
        for t in 0..c {
            let p = own_probs[[i, t]];
            if p > S::zero() {
                kl = kl + p * (p.max(floor) / mean[t].max(floor)).ln();
            }
        }
        value = value + kl;

        for t in 0..c {
            let p = own_probs[[i, t]];
            let log_ratio = (p.max(floor) / mean[t].max(floor)).ln();
            grad_own[[i, t]] = p * (log_ratio - kl) * inv_b1;
        }
        for &j in nbrs {
            // Upstream into this neighbor's probabilities is −p_t/(k·m_t);
            // the softmax identity folds it into the logits gradient.
            let q = counterpart_probs.row(j);
            let mut inner = S::zero();
            for t in 0..c {
                inner = inner + own_probs[[i, t]] / mean[t].max(floor) * q[t];
            }
            for t in 0..c {
                let g = -own_probs[[i, t]] / mean[t].max(floor) + inner;
                grad_cp[[j, t]] += q[t] * g * inv_k * inv_b1;
            }
        }
    }

    Ok(CncrLoss {
        value: value * inv_b1,
        grad_own_logits: grad_own,
        grad_counterpart_logits: grad_cp,
        skipped,
    })
}

/// Stage-1 total: the sum of both modalities' ReID losses. The component
/// gradients live on disjoint tensors, so the total's gradient is exactly
/// the union of the parts'.
pub fn total_loss_stage1<S: Scalar>(reid_v: &ReidLoss<S>, reid_r: &ReidLoss<S>) -> S {
    reid_v.value + reid_r.value
}

/// Stage-2 total `L_CV + L_CR + α·L_R`; the caller scales the consistency
/// gradients by the same α when accumulating.
pub fn total_loss_stage2<S: Scalar>(
    l_cv: &BranchLoss<S>,
    l_cr: &BranchLoss<S>,
    l_r: S,
    weights: &LossWeights<S>,
) -> S {
    l_cv.value + l_cr.value + weights.alpha_cncr * l_r
}
