//! Two-stage training orchestration: stage 1 optimizes the per-modality
//! re-identification losses on the initial pseudo-labels; stage 2
//! alternates, once per epoch, between cross-modality label assignment
//! plus refinement and minibatch SGD on the collaborative objective.
//! Includes the PK (identities × instances) batch sampler.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Modality, ModalityDataset, PseudoLabeling};
use crate::error::{Error, Result};
use crate::losses::{
    cncr_loss, collaborative_loss, reid_loss, total_loss_stage1, total_loss_stage2, LossWeights,
};
use crate::model::{
    backward_and_step, encode, apply_head, BatchPart, ClosureResult, ModelParams, PartForward,
    PartGrads, SgdConfig, SgdState,
};
use crate::neighbor::{
    histogram_upper, inconsistency_scores, knn, refine_labels, score_histogram, split_clean_noisy,
    CleanNoisyPartition, NclrConfig, NeighborIndex, RefineStats, ScoreHistogram,
};
use crate::scalar::Scalar;
use crate::seed;
use crate::transport::{dual_assign, TransportConfig};

const STREAM_SAMPLER: u64 = 20;

/// Bins used for the per-epoch inconsistency-score histogram.
pub const HISTOGRAM_BINS: usize = 50;

/// Hyper-parameters of the full two-stage run.
#[derive(Debug, Clone)]
pub struct TrainConfig<S> {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// P: identities per batch.
    pub ids_per_batch: usize,
    /// K: instances per identity per modality.
    pub instances_per_id: usize,
    pub transport: TransportConfig<S>,
    pub nclr: NclrConfig<S>,
    pub weights: LossWeights<S>,
    pub sgd: SgdConfig<S>,
    pub seed: u64,
}

impl<S: Scalar> Default for TrainConfig<S> {
    fn default() -> Self {
        Self {
            epochs_stage1: 40,
            epochs_stage2: 20,
            ids_per_batch: 8,
            instances_per_id: 4,
            transport: TransportConfig::default(),
            nclr: NclrConfig::default(),
            weights: LossWeights::default(),
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }
}

impl<S: Scalar> TrainConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.ids_per_batch < 2 {
            return Err(Error::Config(format!(
                "ids per batch must be >= 2, got {}",
                self.ids_per_batch
            )));
        }
        if self.instances_per_id == 0 {
            return Err(Error::Config("instances per id must be >= 1".into()));
        }
        self.transport.validate()?;
        self.nclr.validate()?;
        self.weights.validate()?;
        self.sgd.validate()?;
        Ok(())
    }
}

/// Per-term epoch-mean losses of one stage-2 epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLosses<S> {
    pub total: S,
    /// Visible-branch collaborative loss (cross CE + own reid).
    pub cv: S,
    /// Infrared-branch collaborative loss.
    pub cr: S,
    /// Unweighted neighbor-consistency regularizer.
    pub r: S,
}

impl<S: Scalar> Default for EpochLosses<S> {
    fn default() -> Self {
        Self { total: S::zero(), cv: S::zero(), cr: S::zero(), r: S::zero() }
    }
}

/// Everything one stage-2 refresh produces: cross-modality assignments,
/// their refined label distributions, the clean/noisy partitions, and
/// the score histogram; the epoch's loss means are filled in after the
/// SGD sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochState<S> {
    /// Hard visible-space labels assigned to infrared samples.
    pub assigned_r_from_v: Vec<usize>,
    /// Hard infrared-space labels assigned to visible samples.
    pub assigned_v_from_r: Vec<usize>,
    /// Refined label distributions for infrared samples (rows on the
    /// simplex over visible clusters).
    pub refined_r_from_v: Array2<S>,
    /// Refined label distributions for visible samples.
    pub refined_v_from_r: Array2<S>,
    /// Clean/noisy split of the visible samples' assigned labels.
    pub partition_v: CleanNoisyPartition<S>,
    /// Clean/noisy split of the infrared samples' assigned labels.
    pub partition_r: CleanNoisyPartition<S>,
    pub refine_stats_v: RefineStats,
    pub refine_stats_r: RefineStats,
    /// Histogram over the inconsistency scores of both modalities.
    pub score_histogram: ScoreHistogram<S>,
    /// Fraction of correctly assigned samples, when both datasets carry
    /// ground-truth identities.
    pub assign_accuracy: Option<S>,
    pub epoch_losses: EpochLosses<S>,
}

impl<S: Scalar> EpochState<S> {
    /// Mean inconsistency score over both modalities.
    pub fn mean_inconsistency(&self) -> S {
        let n = self.partition_v.scores.len() + self.partition_r.scores.len();
        let sum: S = self
            .partition_v
            .scores
            .iter()
            .chain(self.partition_r.scores.iter())
            .copied()
            .sum();
        sum / S::real(n as f64)
    }
}

/// One row of the epoch log. Stage-1 rows leave the stage-2-only
/// columns empty.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord<S> {
    pub epoch: usize,
    pub stage: u8,
    pub loss_total: S,
    /// Stage 1: visible reid loss; stage 2: visible-branch loss.
    pub loss_cv: S,
    /// Stage 1: infrared reid loss; stage 2: infrared-branch loss.
    pub loss_cr: S,
    pub loss_r: Option<S>,
    pub clean_frac_v: Option<S>,
    pub clean_frac_r: Option<S>,
    pub assign_accuracy: Option<S>,
}

/// Renders the epoch log with the fixed column schema; absent values
/// are empty fields.
pub fn records_csv<S: Scalar>(records: &[EpochRecord<S>]) -> String {
    let mut out = String::from(
        "epoch,stage,loss_total,loss_cv,loss_cr,loss_r,clean_frac_v,clean_frac_r,assign_acc_if_gt\n",
    );
    let fmt = |v: S| format!("{:.16e}", v.to_f64_lossy());
    let opt = |v: Option<S>| v.map(fmt).unwrap_or_default();
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.stage,
            fmt(r.loss_total),
            fmt(r.loss_cv),
            fmt(r.loss_cr),
            opt(r.loss_r),
            opt(r.clean_frac_v),
            opt(r.clean_frac_r),
            opt(r.assign_accuracy),
        );
    }
    out
}

/// Indices of one PK batch, per modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkBatch {
    pub visible: Vec<usize>,
    pub infrared: Vec<usize>,
}

fn choose_distinct(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

fn sample_cluster_members(
    members: &[Vec<usize>],
    cluster_ids: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(cluster_ids.len() * k);
    for &c in cluster_ids {
        let m = &members[c];
        if m.is_empty() {
            return Err(Error::Data(format!("cluster {c} has no members")));
        }
        if m.len() >= k {
            let picks = choose_distinct(m.len(), k, rng);
            out.extend(picks.into_iter().map(|i| m[i]));
        } else {
            for _ in 0..k {
                out.push(m[rng.gen_range(0..m.len())]);
            }
        }
    }
    Ok(out)
}

/// Samples a PK batch: P identities, K instances per identity per
/// modality (with replacement when an identity has fewer than K
/// members), deterministic under `(seed, epoch, step)`.
///
/// Without `pairing`, the P identities are drawn independently per
/// modality. With `pairing` (candidate visible/infrared cluster pairs,
/// as in stage 2), P pairs are drawn; when fewer than P pairs exist,
/// all of them are used.
pub fn pk_sample<S: Scalar>(
    labeling_v: &PseudoLabeling<S>,
    labeling_r: &PseudoLabeling<S>,
    p: usize,
    k: usize,
    seed_value: u64,
    epoch: usize,
    step: usize,
    pairing: Option<&[(usize, usize)]>,
) -> Result<PkBatch> {
    if p < 2 {
        return Err(Error::Config(format!("ids per batch must be >= 2, got {p}")));
    }
    if k == 0 {
        return Err(Error::Config("instances per id must be >= 1".into()));
    }
    if labeling_v.num_clusters < p || labeling_r.num_clusters < p {
        return Err(Error::Config(format!(
            "need at least {p} clusters per modality, have {} visible and {} infrared",
            labeling_v.num_clusters, labeling_r.num_clusters
        )));
    }
    let members_v = labeling_v.members_by_cluster();
    let members_r = labeling_r.members_by_cluster();
    let mut rng = seed::stream(seed_value, &[STREAM_SAMPLER, epoch as u64, step as u64]);

    let (ids_v, ids_r) = match pairing {
        None => {
            let ids_v = choose_distinct(labeling_v.num_clusters, p, &mut rng);
            let ids_r = choose_distinct(labeling_r.num_clusters, p, &mut rng);
            (ids_v, ids_r)
        }
        Some(pairs) => {
            if pairs.len() < 2 {
                return Err(Error::Config(format!(
                    "need at least 2 paired identities, have {}",
                    pairs.len()
                )));
            }
            for &(cv, cr) in pairs {
                if cv >= labeling_v.num_clusters || cr >= labeling_r.num_clusters {
                    return Err(Error::Argument(format!(
                        "pair ({cv}, {cr}) out of range for {}x{} clusters",
                        labeling_v.num_clusters, labeling_r.num_clusters
                    )));
                }
            }
            let effective = p.min(pairs.len());
            let picks = choose_distinct(pairs.len(), effective, &mut rng);
            let ids_v: Vec<usize> = picks.iter().map(|&i| pairs[i].0).collect();
            let ids_r: Vec<usize> = picks.iter().map(|&i| pairs[i].1).collect();
            (ids_v, ids_r)
        }
    };

    let visible = sample_cluster_members(&members_v, &ids_v, k, &mut rng)?;
    let infrared = sample_cluster_members(&members_r, &ids_r, k, &mut rng)?;
    Ok(PkBatch { visible, infrared })
}

/// Pairs each visible cluster with the infrared cluster that received
/// the plurality of its assigned infrared samples (ties toward the
/// lower cluster index); visible clusters that received no samples are
/// left unpaired.
pub fn plurality_pairing(
    assigned_r_from_v: &[usize],
    infrared_hard_labels: &[usize],
    num_clusters_v: usize,
    num_clusters_r: usize,
) -> Result<Vec<(usize, usize)>> {
    if assigned_r_from_v.len() != infrared_hard_labels.len() {
        return Err(Error::Argument(format!(
            "{} assignments but {} infrared labels",
            assigned_r_from_v.len(),
            infrared_hard_labels.len()
        )));
    }
    let mut counts = vec![vec![0usize; num_clusters_r]; num_clusters_v];
    for (&cv, &cr) in assigned_r_from_v.iter().zip(infrared_hard_labels) {
        if cv >= num_clusters_v || cr >= num_clusters_r {
            return Err(Error::Argument(format!(
                "assignment ({cv}, {cr}) out of range for {num_clusters_v}x{num_clusters_r} clusters"
            )));
        }
        counts[cv][cr] += 1;
    }
    let mut pairs = Vec::new();
    for (cv, row) in counts.iter().enumerate() {
        if row.iter().all(|&c| c == 0) {
            continue;
        }
        let mut best = 0;
        for (cr, &c) in row.iter().enumerate() {
            if c > row[best] {
                best = cr;
            }
        }
        pairs.push((cv, best));
    }
    Ok(pairs)
}

/// Minibatch steps per epoch: enough to cover the larger modality once.
pub fn steps_per_epoch(n_v: usize, n_r: usize, p: usize, k: usize) -> usize {
    let batch = p * k;
    let n = n_v.max(n_r);
    n.div_ceil(batch).max(1)
}

fn check_shapes<S: Scalar>(
    model: &ModelParams<S>,
    data_v: &ModalityDataset<S>,
    data_r: &ModalityDataset<S>,
    labeling_v: &PseudoLabeling<S>,
    labeling_r: &PseudoLabeling<S>,
) -> Result<()> {
    if data_v.modality != Modality::Visible || data_r.modality != Modality::Infrared {
        return Err(Error::Argument(format!(
            "expected (visible, infrared) datasets, got ({}, {})",
            data_v.modality, data_r.modality
        )));
    }
    let dims = model.dims();
    if data_v.dim() != dims.d_in || data_r.dim() != dims.d_in {
        return Err(Error::Argument(format!(
            "model expects {}-dimensional inputs, data has {} (visible) and {} (infrared)",
            dims.d_in,
            data_v.dim(),
            data_r.dim()
        )));
    }
    if labeling_v.len() != data_v.len() || labeling_r.len() != data_r.len() {
        return Err(Error::Argument(format!(
            "labelings cover {}/{} samples, datasets have {}/{}",
            labeling_v.len(),
            labeling_r.len(),
            data_v.len(),
            data_r.len()
        )));
    }
    if labeling_v.num_clusters != dims.c_v || labeling_r.num_clusters != dims.c_r {
        return Err(Error::Argument(format!(
            "model heads classify {}/{} clusters, labelings have {}/{}",
            dims.c_v, dims.c_r, labeling_v.num_clusters, labeling_r.num_clusters
        )));
    }
    Ok(())
}

fn gather_rows<S: Scalar>(features: &Array2<S>, idx: &[usize]) -> Array2<S> {
    let mut out = Array2::zeros((idx.len(), features.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&features.row(i));
    }
    out
}

fn neighbor_lists<S: Scalar>(index: &NeighborIndex<S>) -> Vec<Vec<usize>> {
    index.neighbor_ids.rows().into_iter().map(|row| row.to_vec()).collect()
}

fn add_scaled<S: Scalar>(base: Array2<S>, extra: &Array2<S>, scale: S) -> Array2<S> {
    let mut out = base;
    ndarray::Zip::from(&mut out).and(extra).for_each(|o, &e| *o += scale * e);
    out
}

/// Majority ground-truth identity per cluster (ties toward the lower
/// identity); clusters without members map to `None`.
fn cluster_majority_ids(
    hard_labels: &[usize],
    num_clusters: usize,
    gt_ids: &[usize],
) -> Vec<Option<usize>> {
    let mut counts: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); num_clusters];
    for (&c, &id) in hard_labels.iter().zip(gt_ids) {
        *counts[c].entry(id).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .map(|m| {
            let mut best: Option<(usize, usize)> = None;
            for (id, n) in m {
                match best {
                    Some((_, bn)) if n <= bn => {}
                    _ => best = Some((id, n)),
                }
            }
            best.map(|(id, _)| id)
        })
        .collect()
}

/// Stage 1: SGD on the sum of both modalities' reid losses against the
/// initial pseudo-labels, with linear learning-rate warm-up. Returns the
/// per-epoch log (one record per epoch).
pub fn train_stage1<S: Scalar>(
    model: &mut ModelParams<S>,
    data_v: &ModalityDataset<S>,
    data_r: &ModalityDataset<S>,
    labeling_v: &PseudoLabeling<S>,
    labeling_r: &PseudoLabeling<S>,
    cfg: &TrainConfig<S>,
) -> Result<Vec<EpochRecord<S>>> {
    cfg.validate()?;
    check_shapes(model, data_v, data_r, labeling_v, labeling_r)?;
    let hard_v = labeling_v.hard_labels();
    let hard_r = labeling_r.hard_labels();
    let steps = steps_per_epoch(data_v.len(), data_r.len(), cfg.ids_per_batch, cfg.instances_per_id);
    let margin = cfg.weights.triplet_margin;
    let mut sgd = SgdState::new(model, cfg.sgd.momentum);
    let mut records = Vec::with_capacity(cfg.epochs_stage1);

    for epoch in 0..cfg.epochs_stage1 {
        let lr = cfg.sgd.lr_stage1 * cfg.sgd.warmup_factor(epoch);
        let mut sum_total = S::zero();
        let mut sum_v = S::zero();
        let mut sum_r = S::zero();
        for step in 0..steps {
            let batch = pk_sample(
                labeling_v,
                labeling_r,
                cfg.ids_per_batch,
                cfg.instances_per_id,
                cfg.seed,
                epoch,
                step,
                None,
            )?;
            let labels_v: Vec<usize> = batch.visible.iter().map(|&i| hard_v[i]).collect();
            let labels_r: Vec<usize> = batch.infrared.iter().map(|&i| hard_r[i]).collect();
            let parts = vec![
                BatchPart { x: gather_rows(&data_v.features, &batch.visible), head: Modality::Visible },
                BatchPart { x: gather_rows(&data_r.features, &batch.infrared), head: Modality::Infrared },
            ];
            let term_v = Cell::new(S::zero());
            let term_r = Cell::new(S::zero());
            let closure = |fwds: &[PartForward<S>]| {
                let reid_v =
                    reid_loss(fwds[0].embeddings.view(), fwds[0].probs.view(), &labels_v, margin)?;
                let reid_r =
                    reid_loss(fwds[1].embeddings.view(), fwds[1].probs.view(), &labels_r, margin)?;
                term_v.set(reid_v.value);
                term_r.set(reid_r.value);
                let value = total_loss_stage1(&reid_v, &reid_r);
                Ok(ClosureResult {
                    value,
                    part_grads: vec![
                        PartGrads {
                            d_logits: Some(reid_v.grad_logits),
                            d_embeddings: Some(reid_v.grad_embeddings),
                        },
                        PartGrads {
                            d_logits: Some(reid_r.grad_logits),
                            d_embeddings: Some(reid_r.grad_embeddings),
                        },
                    ],
                })
            };
            let value = backward_and_step(model, &parts, &closure, &mut sgd, lr)?;
            sum_total += value;
            sum_v += term_v.get();
            sum_r += term_r.get();
        }
        let inv = S::one() / S::real(steps as f64);
        records.push(EpochRecord {
            epoch,
            stage: 1,
            loss_total: sum_total * inv,
            loss_cv: sum_v * inv,
            loss_cr: sum_r * inv,
            loss_r: None,
            clean_frac_v: None,
            clean_frac_r: None,
            assign_accuracy: None,
        });
    }
    Ok(records)
}

/// One stage-2 refresh from the current model state: full-dataset
/// cross-predictions, dual optimal-transport assignment, neighbor-based
/// inconsistency scoring, clean/noisy partitioning, and label
/// refinement for both modalities.
pub fn epoch_refresh<S: Scalar>(
    model: &ModelParams<S>,
    data_v: &ModalityDataset<S>,
    data_r: &ModalityDataset<S>,
    labeling_v: &PseudoLabeling<S>,
    labeling_r: &PseudoLabeling<S>,
    cfg: &TrainConfig<S>,
) -> Result<EpochState<S>> {
    cfg.validate()?;
    check_shapes(model, data_v, data_r, labeling_v, labeling_r)?;
    let c_v = labeling_v.num_clusters;
    let c_r = labeling_r.num_clusters;
    let k = cfg.nclr.k;

    let cache_v = encode(model, data_v.features.view())?;
    let cache_r = encode(model, data_r.features.view())?;
    let emb_v = &cache_v.embeddings;
    let emb_r = &cache_r.embeddings;
    let (_, pred_r_under_v) = apply_head(model, emb_r.view(), Modality::Visible);
    let (_, pred_v_under_r) = apply_head(model, emb_v.view(), Modality::Infrared);

    let dual = dual_assign(pred_r_under_v.view(), pred_v_under_r.view(), &cfg.transport)?;
    let assigned_r = PseudoLabeling::<S>::from_hard(&dual.labels_r_from_v, c_v)?;
    let assigned_v = PseudoLabeling::<S>::from_hard(&dual.labels_v_from_r, c_r)?;

    // Cross-modality neighbors score each sample's assigned label
    // against its neighbors' original labels in the assigning modality.
    let index_r_to_v = knn(emb_r.view(), emb_v.view(), k, false)?;
    let index_v_to_r = knn(emb_v.view(), emb_r.view(), k, false)?;
    let scores_r =
        inconsistency_scores(assigned_r.labels.view(), labeling_v.labels.view(), &index_r_to_v)?;
    let scores_v =
        inconsistency_scores(assigned_v.labels.view(), labeling_r.labels.view(), &index_v_to_r)?;
    let partition_r = split_clean_noisy(scores_r, cfg.nclr.tau);
    let partition_v = split_clean_noisy(scores_v, cfg.nclr.tau);

    // Same-modality clean neighbors drive the refinement.
    let index_r_same = knn(emb_r.view(), emb_r.view(), k, true)?;
    let index_v_same = knn(emb_v.view(), emb_v.view(), k, true)?;
    let (refined_r_from_v, refine_stats_r) =
        refine_labels(assigned_r.labels.view(), &partition_r, &index_r_same, &cfg.nclr)?;
    let (refined_v_from_r, refine_stats_v) =
        refine_labels(assigned_v.labels.view(), &partition_v, &index_v_same, &cfg.nclr)?;

    let combined: Vec<S> = partition_r
        .scores
        .iter()
        .chain(partition_v.scores.iter())
        .copied()
        .collect();
    let upper = histogram_upper(&combined, cfg.nclr.tau);
    let histogram = score_histogram(&combined, HISTOGRAM_BINS, upper)?;

    let assign_accuracy = match (&data_v.gt_ids, &data_r.gt_ids) {
        (Some(gt_v), Some(gt_r)) => {
            let hard_v = labeling_v.hard_labels();
            let hard_r = labeling_r.hard_labels();
            let majority_v = cluster_majority_ids(&hard_v, c_v, gt_v);
            let majority_r = cluster_majority_ids(&hard_r, c_r, gt_r);
            let mut correct = 0usize;
            for (i, &cv) in dual.labels_r_from_v.iter().enumerate() {
                if majority_v[cv] == Some(gt_r[i]) {
                    correct += 1;
                }
            }
            for (i, &cr) in dual.labels_v_from_r.iter().enumerate() {
                if majority_r[cr] == Some(gt_v[i]) {
                    correct += 1;
                }
            }
            Some(S::real(correct as f64 / (data_v.len() + data_r.len()) as f64))
        }
        _ => None,
    };

    Ok(EpochState {
        assigned_r_from_v: dual.labels_r_from_v,
        assigned_v_from_r: dual.labels_v_from_r,
        refined_r_from_v,
        refined_v_from_r,
        partition_v,
        partition_r,
        refine_stats_v,
        refine_stats_r,
        score_histogram: histogram,
        assign_accuracy,
        epoch_losses: EpochLosses::default(),
    })
}

/// Stage 2: per epoch, refresh assignments from the current model, then
/// run minibatch SGD on the collaborative objective (both branch losses
/// plus the weighted neighbor-consistency regularizer). Every branch
/// batch contains both modalities' samples; CNCR neighbors are searched
/// within the batch. Returns the epoch log and the per-epoch states.
pub fn train_stage2<S: Scalar>(
    model: &mut ModelParams<S>,
    data_v: &ModalityDataset<S>,
    data_r: &ModalityDataset<S>,
    labeling_v: &PseudoLabeling<S>,
    labeling_r: &PseudoLabeling<S>,
    cfg: &TrainConfig<S>,
) -> Result<(Vec<EpochRecord<S>>, Vec<EpochState<S>>)> {
    cfg.validate()?;
    check_shapes(model, data_v, data_r, labeling_v, labeling_r)?;
    let hard_v = labeling_v.hard_labels();
    let hard_r = labeling_r.hard_labels();
    let steps = steps_per_epoch(data_v.len(), data_r.len(), cfg.ids_per_batch, cfg.instances_per_id);
    let margin = cfg.weights.triplet_margin;
    let alpha = cfg.weights.alpha_cncr;
    let mut sgd = SgdState::new(model, cfg.sgd.momentum);
    let mut records = Vec::with_capacity(cfg.epochs_stage2);
    let mut states = Vec::with_capacity(cfg.epochs_stage2);

    for e in 0..cfg.epochs_stage2 {
        let epoch = cfg.epochs_stage1 + e;
        let mut state = epoch_refresh(model, data_v, data_r, labeling_v, labeling_r, cfg)?;
        let pairs = plurality_pairing(
            &state.assigned_r_from_v,
            &hard_r,
            labeling_v.num_clusters,
            labeling_r.num_clusters,
        )?;
        let lr = cfg.sgd.lr_stage2;
        let mut sum_total = S::zero();
        let mut sum_cv = S::zero();
        let mut sum_cr = S::zero();
        let mut sum_r = S::zero();
        for step in 0..steps {
            let batch = pk_sample(
                labeling_v,
                labeling_r,
                cfg.ids_per_batch,
                cfg.instances_per_id,
                cfg.seed,
                epoch,
                step,
                Some(&pairs),
            )?;
            let labels_v: Vec<usize> = batch.visible.iter().map(|&i| hard_v[i]).collect();
            let labels_r: Vec<usize> = batch.infrared.iter().map(|&i| hard_r[i]).collect();
            let targets_r_from_v = gather_rows(&state.refined_r_from_v, &batch.infrared);
            let targets_v_from_r = gather_rows(&state.refined_v_from_r, &batch.visible);
            let x_v = gather_rows(&data_v.features, &batch.visible);
            let x_r = gather_rows(&data_r.features, &batch.infrared);
            // Parts 0/1 feed the visible branch (own + cross samples
            // under the visible head), parts 2/3 the infrared branch.
            let parts = vec![
                BatchPart { x: x_v.clone(), head: Modality::Visible },
                BatchPart { x: x_r.clone(), head: Modality::Visible },
                BatchPart { x: x_r, head: Modality::Infrared },
                BatchPart { x: x_v, head: Modality::Infrared },
            ];
            let k_vr = cfg.nclr.k.min(batch.infrared.len());
            let k_rv = cfg.nclr.k.min(batch.visible.len());
            let term_cv = Cell::new(S::zero());
            let term_cr = Cell::new(S::zero());
            let term_r = Cell::new(S::zero());
            let closure = |fwds: &[PartForward<S>]| {
                let reid_v =
                    reid_loss(fwds[0].embeddings.view(), fwds[0].probs.view(), &labels_v, margin)?;
                let l_cv =
                    collaborative_loss(fwds[1].probs.view(), targets_r_from_v.view(), reid_v)?;
                let reid_r =
                    reid_loss(fwds[2].embeddings.view(), fwds[2].probs.view(), &labels_r, margin)?;
                let l_cr =
                    collaborative_loss(fwds[3].probs.view(), targets_v_from_r.view(), reid_r)?;

                let index_vr = knn(fwds[0].embeddings.view(), fwds[1].embeddings.view(), k_vr, false)?;
                let rv = cncr_loss(
                    fwds[0].probs.view(),
                    fwds[1].probs.view(),
                    &neighbor_lists(&index_vr),
                )?;
                let index_rv = knn(fwds[2].embeddings.view(), fwds[3].embeddings.view(), k_rv, false)?;
                let rr = cncr_loss(
                    fwds[2].probs.view(),
                    fwds[3].probs.view(),
                    &neighbor_lists(&index_rv),
                )?;
                let l_r = rv.value + rr.value;
                let value = total_loss_stage2(&l_cv, &l_cr, l_r, &cfg.weights);
                term_cv.set(l_cv.value);
                term_cr.set(l_cr.value);
                term_r.set(l_r);
                Ok(ClosureResult {
                    value,
                    part_grads: vec![
                        PartGrads {
                            d_logits: Some(add_scaled(
                                l_cv.reid.grad_logits,
                                &rv.grad_own_logits,
                                alpha,
                            )),
                            d_embeddings: Some(l_cv.reid.grad_embeddings),
                        },
                        PartGrads {
                            d_logits: Some(add_scaled(
                                l_cv.grad_cross_logits,
                                &rv.grad_counterpart_logits,
                                alpha,
                            )),
                            d_embeddings: None,
                        },
                        PartGrads {
                            d_logits: Some(add_scaled(
                                l_cr.reid.grad_logits,
                                &rr.grad_own_logits,
                                alpha,
                            )),
                            d_embeddings: Some(l_cr.reid.grad_embeddings),
                        },
                        PartGrads {
                            d_logits: Some(add_scaled(
                                l_cr.grad_cross_logits,
                                &rr.grad_counterpart_logits,
                                alpha,
                            )),
                            d_embeddings: None,
                        },
                    ],
                })
            };
            let value = backward_and_step(model, &parts, &closure, &mut sgd, lr)?;
            sum_total += value;
            sum_cv += term_cv.get();
            sum_cr += term_cr.get();
            sum_r += term_r.get();
        }
        let inv = S::one() / S::real(steps as f64);
        state.epoch_losses = EpochLosses {
            total: sum_total * inv,
            cv: sum_cv * inv,
            cr: sum_cr * inv,
            r: sum_r * inv,
        };
        records.push(EpochRecord {
            epoch,
            stage: 2,
            loss_total: state.epoch_losses.total,
            loss_cv: state.epoch_losses.cv,
            loss_cr: state.epoch_losses.cr,
            loss_r: Some(state.epoch_losses.r),
            clean_frac_v: Some(state.partition_v.clean_fraction()),
            clean_frac_r: Some(state.partition_r.clean_fraction()),
            assign_accuracy: state.assign_accuracy,
        });
        states.push(state);
    }
    Ok((records, states))
}
