//! Synthetic two-modality datasets, k-means pseudo-label initialization,
//! and dataset file I/O.
//!
//! A synthetic problem draws one latent vector per identity; visible
//! samples scatter around the latent directly while infrared samples
//! scatter around a rigidly transformed copy (rotation plus offset, both
//! scaled by `gap_strength`). Identities are known at generation time and
//! carried along as optional ground truth for evaluation.

use std::fmt;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

const STREAM_CENTERS: u64 = 1;
const STREAM_TRANSFORM: u64 = 2;
const STREAM_VISIBLE: u64 = 3;
const STREAM_INFRARED: u64 = 4;
const STREAM_KMEANS: u64 = 5;

/// Standard deviation of identity-center coordinates. Deliberately of
/// the same order as typical `noise_sigma` values, so per-sample scatter
/// genuinely blurs cluster boundaries instead of being negligible
/// against the center layout.
const CENTER_SCALE: f64 = 0.5;
/// Rotation angle shared by every Givens factor at `gap_strength = 1`.
/// Each factor acts on its own coordinate pair, so the whole rotation
/// displaces every latent by exactly `2 sin(θ/2)` times its norm and the
/// modality gap is the same magnitude regardless of seed.
const ROTATION_ANGLE_SCALE: f64 = 0.3 * std::f64::consts::PI;
/// Scale of the per-coordinate modality offset at `gap_strength = 1`,
/// relative to the center layout.
const OFFSET_SCALE: f64 = CENTER_SCALE;

/// Which of the two sensor domains a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Visible,
    Infrared,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visible => "visible",
            Modality::Infrared => "infrared",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "visible" => Some(Modality::Visible),
            "infrared" => Some(Modality::Infrared),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters of the synthetic two-modality generator.
#[derive(Debug, Clone)]
pub struct SynthConfig<S> {
    /// Number of identities C (≥ 2).
    pub num_identities: usize,
    /// Input feature dimension D (≥ 2).
    pub dim: usize,
    /// Visible samples per identity (≥ 1).
    pub per_id_visible: usize,
    /// Infrared samples per identity (≥ 1).
    pub per_id_infrared: usize,
    /// Per-coordinate Gaussian noise std (≥ 0).
    pub noise_sigma: S,
    /// Magnitude of the fixed modality transform (≥ 0); zero means the two
    /// modalities share the identical latent layout.
    pub gap_strength: S,
    /// Base seed for all generator randomness.
    pub seed: u64,
}

impl<S: Scalar> SynthConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Config(format!(
                "num_identities must be >= 2, got {}",
                self.num_identities
            )));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("dim must be >= 2, got {}", self.dim)));
        }
        if self.per_id_visible < 1 || self.per_id_infrared < 1 {
            return Err(Error::Config(format!(
                "per-identity sample counts must be >= 1, got visible {} / infrared {}",
                self.per_id_visible, self.per_id_infrared
            )));
        }
        if !(self.noise_sigma >= S::zero()) {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.gap_strength >= S::zero()) {
            return Err(Error::Config(format!(
                "gap_strength must be >= 0, got {}",
                self.gap_strength
            )));
        }
        Ok(())
    }
}

/// Feature vectors of one modality, with optional ground-truth identities.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityDataset<S> {
    /// N×D feature matrix.
    pub features: Array2<S>,
    pub modality: Modality,
    /// Ground-truth identity per row; present only for synthetic data.
    pub gt_ids: Option<Vec<usize>>,
}

impl<S: Scalar> ModalityDataset<S> {
    pub fn new(features: Array2<S>, modality: Modality, gt_ids: Option<Vec<usize>>) -> Result<Self> {
        if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
            let row = bad / features.ncols().max(1);
            return Err(Error::Data(format!("non-finite feature in row {row}")));
        }
        if let Some(ids) = &gt_ids {
            if ids.len() != features.nrows() {
                return Err(Error::Data(format!(
                    "gt_ids length {} does not match {} rows",
                    ids.len(),
                    features.nrows()
                )));
            }
        }
        Ok(Self { features, modality, gt_ids })
    }

    /// Number of samples N.
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Feature dimension D.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Per-sample label distributions over a cluster space.
///
/// Rows live on the probability simplex; hard labels are the special case
/// of one-hot rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeling<S> {
    /// N×K row-stochastic matrix.
    pub labels: Array2<S>,
    pub num_clusters: usize,
}

impl<S: Scalar> PseudoLabeling<S> {
    /// Builds one-hot labels from hard cluster assignments.
    pub fn from_hard(assignments: &[usize], num_clusters: usize) -> Result<Self> {
        if num_clusters == 0 {
            return Err(Error::Argument("num_clusters must be >= 1".into()));
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a >= num_clusters) {
            return Err(Error::Argument(format!(
                "assignment {bad} out of range for {num_clusters} clusters"
            )));
        }
        let mut labels = Array2::zeros((assignments.len(), num_clusters));
        for (i, &a) in assignments.iter().enumerate() {
            labels[[i, a]] = S::one();
        }
        Ok(Self { labels, num_clusters })
    }

    /// Builds a labeling from an explicit row-stochastic matrix.
    pub fn from_soft(labels: Array2<S>) -> Result<Self> {
        let num_clusters = labels.ncols();
        let out = Self { labels, num_clusters };
        out.validate()?;
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.labels.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks row-simplex structure: entries in [0,1], rows sum to 1
    /// within 1e-9.
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 {
            return Err(Error::Data("labeling has zero clusters".into()));
        }
        if self.labels.ncols() != self.num_clusters {
            return Err(Error::Data(format!(
                "label matrix has {} columns for {} clusters",
                self.labels.ncols(),
                self.num_clusters
            )));
        }
        let tol = S::real(1e-9);
        for (i, row) in self.labels.rows().into_iter().enumerate() {
            if row.iter().any(|&v| v < -tol || v > S::one() + tol || !v.is_finite()) {
                return Err(Error::Data(format!("label row {i} has entries outside [0,1]")));
            }
            if (row.sum() - S::one()).abs() > tol {
                return Err(Error::Data(format!("label row {i} does not sum to 1")));
            }
        }
        Ok(())
    }

    /// Checks that every cluster owns at least one row by argmax
    /// (required of freshly compacted initial labelings).
    pub fn validate_no_empty_cluster(&self) -> Result<()> {
        let mut seen = vec![false; self.num_clusters];
        for &h in &self.hard_labels() {
            seen[h] = true;
        }
        if let Some(empty) = seen.iter().position(|&s| !s) {
            return Err(Error::Data(format!("cluster {empty} owns no samples")));
        }
        Ok(())
    }

    /// Argmax label per row, ties broken toward the lowest cluster index.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.labels
            .rows()
            .into_iter()
            .map(|row| argmax_lowest(row))
            .collect()
    }

    /// Row indices grouped by hard label.
    pub fn members_by_cluster(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_clusters];
        for (i, h) in self.hard_labels().into_iter().enumerate() {
            members[h].push(i);
        }
        members
    }
}

/// Index of the row maximum, ties broken toward the lowest index.
pub(crate) fn argmax_lowest<S: Scalar>(row: ArrayView1<S>) -> usize {
    let mut best = 0;
    let mut best_v = S::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// The fixed rigid map applied to infrared latents: disjoint-plane Givens
/// rotations followed by a translation. The coordinate pairing and the
/// sign of each angle are drawn per seed; the magnitude is fixed so the
/// gap does not fluctuate with the plane draw.
struct ModalityTransform<S> {
    /// (plane axis a, plane axis b, cos θ, sin θ) per factor.
    rotations: Vec<(usize, usize, S, S)>,
    offset: Array1<S>,
    identity: bool,
}

impl<S: Scalar> ModalityTransform<S> {
    fn draw(cfg: &SynthConfig<S>) -> Self {
        let d = cfg.dim;
        let mut rng = seed::stream(cfg.seed, &[STREAM_TRANSFORM]);
        let gap = cfg.gap_strength;
        let mut coords: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            let j = rng.gen_range(0..=i);
            coords.swap(i, j);
        }
        let mut rotations = Vec::with_capacity(d / 2);
        for pair in coords.chunks_exact(2) {
            let sign = if rng.gen_bool(0.5) { S::one() } else { -S::one() };
            let theta = sign * gap * S::real(ROTATION_ANGLE_SCALE);
            rotations.push((pair[0], pair[1], theta.cos(), theta.sin()));
        }
        let offset = Array1::from_shape_fn(d, |_| {
            let w: f64 = StandardNormal.sample(&mut rng);
            gap * S::real(OFFSET_SCALE * w)
        });
        Self { rotations, offset, identity: gap == S::zero() }
    }

    fn apply(&self, x: ArrayView1<S>) -> Array1<S> {
        let mut out = x.to_owned();
        if self.identity {
            return out;
        }
        for &(a, b, c, s) in &self.rotations {
            let xa = out[a];
            let xb = out[b];
            out[a] = c * xa - s * xb;
            out[b] = s * xa + c * xb;
        }
        out += &self.offset;
        out
    }
}

/// Generates the visible and infrared datasets described by `cfg`.
///
/// Deterministic in `cfg.seed`; ground-truth identities are populated in
/// both outputs. With `gap_strength = 0` and `noise_sigma = 0` the two
/// modalities contain identical vectors per identity.
pub fn generate_dataset<S: Scalar>(
    cfg: &SynthConfig<S>,
) -> Result<(ModalityDataset<S>, ModalityDataset<S>)> {
    cfg.validate()?;
    let c = cfg.num_identities;
    let d = cfg.dim;

    let mut center_rng = seed::stream(cfg.seed, &[STREAM_CENTERS]);
    let centers = Array2::from_shape_fn((c, d), |_| {
        let z: f64 = StandardNormal.sample(&mut center_rng);
        S::real(CENTER_SCALE * z)
    });
    let transform = ModalityTransform::draw(cfg);

    let scatter = |center: ArrayView1<S>, count: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut rows = Array2::zeros((count, d));
        for mut row in rows.rows_mut() {
            for (j, cell) in row.iter_mut().enumerate() {
                let eps: f64 = StandardNormal.sample(rng);
                *cell = center[j] + cfg.noise_sigma * S::real(eps);
            }
        }
        rows
    };

    let mut vis_rng = seed::stream(cfg.seed, &[STREAM_VISIBLE]);
    let mut inf_rng = seed::stream(cfg.seed, &[STREAM_INFRARED]);
    let mut vis = Array2::zeros((c * cfg.per_id_visible, d));
    let mut inf = Array2::zeros((c * cfg.per_id_infrared, d));
    let mut vis_ids = Vec::with_capacity(vis.nrows());
    let mut inf_ids = Vec::with_capacity(inf.nrows());
    for id in 0..c {
        let vis_block = scatter(centers.row(id), cfg.per_id_visible, &mut vis_rng);
        let latent_inf = transform.apply(centers.row(id));
        let inf_block = scatter(latent_inf.view(), cfg.per_id_infrared, &mut inf_rng);
        for (r, row) in vis_block.rows().into_iter().enumerate() {
            vis.row_mut(id * cfg.per_id_visible + r).assign(&row);
            vis_ids.push(id);
        }
        for (r, row) in inf_block.rows().into_iter().enumerate() {
            inf.row_mut(id * cfg.per_id_infrared + r).assign(&row);
            inf_ids.push(id);
        }
    }

    Ok((
        ModalityDataset::new(vis, Modality::Visible, Some(vis_ids))?,
        ModalityDataset::new(inf, Modality::Infrared, Some(inf_ids))?,
    ))
}

/// Result of one k-means fit.
#[derive(Debug, Clone)]
pub struct KmeansFit<S> {
    /// k×D centroid matrix (in seeding order, possibly with empty clusters).
    pub centroids: Array2<S>,
    /// Cluster index per sample.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances after each iteration;
    /// non-increasing.
    pub objective_trace: Vec<S>,
}

fn nearest_row<S: Scalar>(x: ArrayView1<S>, rows: ArrayView2<S>) -> (usize, S) {
    let mut best = 0;
    let mut best_d2 = S::infinity();
    for (j, r) in rows.rows().into_iter().enumerate() {
        let d2 = squared_distance(x, r);
        if d2 < best_d2 {
            best_d2 = d2;
            best = j;
        }
    }
    (best, best_d2)
}

pub(crate) fn squared_distance<S: Scalar>(a: ArrayView1<S>, b: ArrayView1<S>) -> S {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let diff = x - y;
            diff * diff
        })
        .sum()
}

/// Lloyd's k-means with seeded farthest-point initialization.
///
/// The first center is drawn uniformly; each later center is the point
/// farthest from the chosen set (ties toward the lowest index). Empty
/// clusters keep their previous centroid, which preserves the
/// non-increasing objective. Stops when assignments stabilize or after
/// `max_iter` iterations.
pub fn kmeans<S: Scalar>(
    features: ArrayView2<S>,
    k: usize,
    seed_value: u64,
    max_iter: usize,
) -> Result<KmeansFit<S>> {
    let n = features.nrows();
    let d = features.ncols();
    if k == 0 || k > n {
        return Err(Error::Argument(format!(
            "cluster count k must satisfy 1 <= k <= {n}, got {k}"
        )));
    }
    if max_iter == 0 {
        return Err(Error::Argument("max_iter must be >= 1".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature passed to kmeans".into()));
    }

    // Farthest-point seeding.
    let mut rng = seed::stream(seed_value, &[STREAM_KMEANS]);
    let first = rng.gen_range(0..n);
    let mut centroids = Array2::zeros((k, d));
    centroids.row_mut(0).assign(&features.row(first));
    let mut nearest_d2: Vec<S> = (0..n)
        .map(|i| squared_distance(features.row(i), features.row(first)))
        .collect();
    for next in 1..k {
        let mut far = 0;
        let mut far_d2 = S::neg_infinity();
        for (i, &d2) in nearest_d2.iter().enumerate() {
            if d2 > far_d2 {
                far_d2 = d2;
                far = i;
            }
        }
        centroids.row_mut(next).assign(&features.row(far));
        for i in 0..n {
            let d2 = squared_distance(features.row(i), features.row(far));
            if d2 < nearest_d2[i] {
                nearest_d2[i] = d2;
            }
        }
    }

    // Lloyd iterations.
    let mut assignments = vec![usize::MAX; n];
    let mut objective_trace = Vec::new();
    for _ in 0..max_iter {
        let mut objective = S::zero();
        let mut changed = false;
        for i in 0..n {
            let (j, d2) = nearest_row(features.row(i), centroids.view());
            objective = objective + d2;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        objective_trace.push(objective);
        if !changed {
            break;
        }
        let mut sums = Array2::<S>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            let mut s = sums.row_mut(a);
            s += &features.row(i);
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = S::one() / S::real(counts[j] as f64);
                centroids.row_mut(j).assign(&(&sums.row(j) * inv));
            }
        }
    }

    Ok(KmeansFit { centroids, assignments, objective_trace })
}

/// Clusters one modality's features and returns one-hot pseudo-labels
/// with cluster ids compacted to `0..K'` (empty clusters dropped).
pub fn cluster_init<S: Scalar>(
    features: ArrayView2<S>,
    k: usize,
    seed_value: u64,
    max_iter: usize,
) -> Result<PseudoLabeling<S>> {
    let fit = kmeans(features, k, seed_value, max_iter)?;
    let mut used = vec![false; k];
    for &a in &fit.assignments {
        used[a] = true;
    }
    let mut remap = vec![usize::MAX; k];
    let mut next = 0;
    for j in 0..k {
        if used[j] {
            remap[j] = next;
            next += 1;
        }
    }
    let compacted: Vec<usize> = fit.assignments.iter().map(|&a| remap[a]).collect();
    let labeling = PseudoLabeling::from_hard(&compacted, next)?;
    labeling.validate()?;
    labeling.validate_no_empty_cluster()?;
    Ok(labeling)
}

/// Writes a dataset in the plain-text format:
/// line 1 is `N D modality has_gt`, then one line per sample of D floats
/// (17 significant digits) plus the ground-truth id when present.
pub fn save_dataset<S: Scalar>(ds: &ModalityDataset<S>, path: &Path) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let has_gt = u8::from(ds.gt_ids.is_some());
    writeln!(w, "{} {} {} {}", ds.len(), ds.dim(), ds.modality, has_gt)?;
    let mut line = String::new();
    for i in 0..ds.len() {
        line.clear();
        for j in 0..ds.dim() {
            if j > 0 {
                line.push(' ');
            }
            write!(line, "{:.16e}", ds.features[[i, j]].to_f64_lossy()).expect("string write");
        }
        if let Some(ids) = &ds.gt_ids {
            write!(line, " {}", ids[i]).expect("string write");
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]; the round trip is exact.
pub fn load_dataset<S: Scalar>(path: &Path) -> Result<ModalityDataset<S>> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let header = match lines.next() {
        Some(l) => l?,
        None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
    };
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 4 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must be 'N D modality has_gt', found {} tokens", tokens.len()),
        });
    }
    let n: usize = tokens[0].parse().map_err(|_| Error::Parse {
        line: 1,
        msg: format!("invalid sample count '{}'", tokens[0]),
    })?;
    let d: usize = tokens[1].parse().map_err(|_| Error::Parse {
        line: 1,
        msg: format!("invalid dimension '{}'", tokens[1]),
    })?;
    let modality = Modality::parse(tokens[2]).ok_or_else(|| Error::Parse {
        line: 1,
        msg: format!("modality must be 'visible' or 'infrared', found '{}'", tokens[2]),
    })?;
    let has_gt = match tokens[3] {
        "0" => false,
        "1" => true,
        other => {
            return Err(Error::Parse { line: 1, msg: format!("has_gt must be 0 or 1, found '{other}'") })
        }
    };

    let expected_tokens = d + usize::from(has_gt);
    let mut features = Vec::with_capacity(n * d);
    let mut gt_ids = has_gt.then(|| Vec::with_capacity(n));
    for i in 0..n {
        let line_no = i + 2;
        let line = match lines.next() {
            Some(l) => l?,
            None => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unexpected end of file: expected {n} data rows, found {i}"),
                })
            }
        };
        let row: Vec<&str> = line.split_whitespace().collect();
        if row.len() != expected_tokens {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {expected_tokens} tokens, found {}", row.len()),
            });
        }
        for (t, tok) in row.iter().take(d).enumerate() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("token {}: invalid number '{tok}'", t + 1),
            })?;
            features.push(S::real(v));
        }
        if let Some(ids) = gt_ids.as_mut() {
            let tok = row[d];
            let id: usize = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("token {}: invalid identity '{tok}'", d + 1),
            })?;
            ids.push(id);
        }
    }
    for (extra, line) in lines.enumerate() {
        if !line?.trim().is_empty() {
            return Err(Error::Parse {
                line: n + 2 + extra,
                msg: format!("expected end of file after {n} data rows"),
            });
        }
    }

    let features = Array2::from_shape_vec((n, d), features)
        .map_err(|e| Error::Data(format!("bad feature shape: {e}")))?;
    ModalityDataset::new(features, modality, gt_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_cfg() -> SynthConfig<f64> {
        SynthConfig {
            num_identities: 3,
            dim: 4,
            per_id_visible: 2,
            per_id_infrared: 2,
            noise_sigma: 0.1,
            gap_strength: 0.5,
            seed: 11,
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = small_cfg();
        cfg.num_identities = 1;
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        cfg = small_cfg();
        cfg.dim = 1;
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        cfg = small_cfg();
        cfg.per_id_infrared = 0;
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        cfg = small_cfg();
        cfg.noise_sigma = -0.1;
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        cfg = small_cfg();
        cfg.gap_strength = f64::NAN;
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn generation_counts_match_config() {
        let (vis, inf) = generate_dataset(&small_cfg()).unwrap();
        assert_eq!(vis.len(), 6);
        assert_eq!(inf.len(), 6);
        assert_eq!(vis.dim(), 4);
        assert_eq!(inf.dim(), 4);
        assert_eq!(vis.modality, Modality::Visible);
        assert_eq!(inf.modality, Modality::Infrared);
        assert_eq!(vis.gt_ids.as_ref().unwrap(), &[0, 0, 1, 1, 2, 2]);
        assert_eq!(inf.gt_ids.as_ref().unwrap(), &[0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn zero_noise_zero_gap_duplicates_across_modalities() {
        let mut cfg = small_cfg();
        cfg.noise_sigma = 0.0;
        cfg.gap_strength = 0.0;
        let (vis, inf) = generate_dataset(&cfg).unwrap();
        for id in 0..cfg.num_identities {
            for vi in 0..cfg.per_id_visible {
                for ii in 0..cfg.per_id_infrared {
                    let v = vis.features.row(id * cfg.per_id_visible + vi);
                    let r = inf.features.row(id * cfg.per_id_infrared + ii);
                    assert_eq!(v, r);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (va, ia) = generate_dataset(&small_cfg()).unwrap();
        let (vb, ib) = generate_dataset(&small_cfg()).unwrap();
        assert_eq!(va, vb);
        assert_eq!(ia, ib);
    }

    #[test]
    fn modality_transform_is_rigid() {
        // Rotation plus translation preserves pairwise distances between
        // class latents; with zero noise the per-id rows expose the latents.
        let mut cfg = small_cfg();
        cfg.noise_sigma = 0.0;
        cfg.gap_strength = 1.0;
        cfg.num_identities = 5;
        let (vis, inf) = generate_dataset(&cfg).unwrap();
        for a in 0..5 {
            for b in (a + 1)..5 {
                let dv = squared_distance(
                    vis.features.row(a * cfg.per_id_visible),
                    vis.features.row(b * cfg.per_id_visible),
                );
                let di = squared_distance(
                    inf.features.row(a * cfg.per_id_infrared),
                    inf.features.row(b * cfg.per_id_infrared),
                );
                assert!((dv - di).abs() < 1e-9, "rigidity violated: {dv} vs {di}");
            }
        }
        // And the gap is real: infrared latents moved away from visible ones.
        let moved = squared_distance(vis.features.row(0), inf.features.row(0));
        assert!(moved > 1e-3);
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut cfg = small_cfg();
        cfg.num_identities = 2;
        cfg.per_id_visible = 20;
        cfg.noise_sigma = 0.01;
        cfg.seed = 3;
        let (vis, _) = generate_dataset(&cfg).unwrap();
        let labeling = cluster_init(vis.features.view(), 2, 99, 100).unwrap();
        let hard = labeling.hard_labels();
        let gt = vis.gt_ids.unwrap();
        // Partition equality up to label permutation.
        let flipped = hard[0] != gt[0];
        for (h, g) in hard.iter().zip(gt.iter()) {
            let mapped = if flipped { 1 - *h } else { *h };
            assert_eq!(mapped, *g);
        }
    }

    #[test]
    fn kmeans_with_k_equal_n_gives_singletons() {
        let feats = array![[0.0_f64, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        let labeling = cluster_init(feats.view(), 4, 1, 50).unwrap();
        let mut hard = labeling.hard_labels();
        assert_eq!(labeling.num_clusters, 4);
        hard.sort_unstable();
        assert_eq!(hard, vec![0, 1, 2, 3]);
    }

    #[test]
    fn kmeans_matches_exhaustive_two_cluster_solution() {
        // Both balanced 3/3 partitions of the 1-D points were enumerated by
        // hand; the optimal centroids are 0.1 and 5.1.
        let pts = array![[0.0_f64], [0.1], [0.2], [5.0], [5.1], [5.2]];
        let fit = kmeans(pts.view(), 2, 7, 100).unwrap();
        let mut cents: Vec<f64> = fit.centroids.column(0).to_vec();
        cents.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((cents[0] - 0.1).abs() < 1e-9);
        assert!((cents[1] - 5.1).abs() < 1e-9);
    }

    #[test]
    fn kmeans_objective_is_non_increasing() {
        let mut cfg = small_cfg();
        cfg.num_identities = 6;
        cfg.per_id_visible = 10;
        cfg.noise_sigma = 0.8;
        let (vis, _) = generate_dataset(&cfg).unwrap();
        let fit = kmeans(vis.features.view(), 6, 5, 100).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn kmeans_rejects_bad_arguments() {
        let feats = array![[0.0_f64, 0.0], [1.0, 0.0]];
        assert!(matches!(kmeans(feats.view(), 3, 1, 10), Err(Error::Argument(_))));
        assert!(matches!(kmeans(feats.view(), 0, 1, 10), Err(Error::Argument(_))));
        assert!(matches!(kmeans(feats.view(), 1, 1, 0), Err(Error::Argument(_))));
        let bad = array![[f64::NAN, 0.0], [1.0, 0.0]];
        assert!(matches!(kmeans(bad.view(), 1, 1, 10), Err(Error::Data(_))));
    }

    #[test]
    fn cluster_init_output_is_one_hot_and_compact() {
        let (vis, _) = generate_dataset(&small_cfg()).unwrap();
        let labeling = cluster_init(vis.features.view(), 3, 4, 100).unwrap();
        labeling.validate().unwrap();
        labeling.validate_no_empty_cluster().unwrap();
        for row in labeling.labels.rows() {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            assert_eq!(ones, 1);
            assert_eq!(ones + zeros, row.len());
        }
    }

    #[test]
    fn pseudo_labeling_validation_catches_bad_rows() {
        let bad = PseudoLabeling { labels: array![[0.5_f64, 0.4]], num_clusters: 2 };
        assert!(matches!(bad.validate(), Err(Error::Data(_))));
        let bad = PseudoLabeling { labels: array![[1.5_f64, -0.5]], num_clusters: 2 };
        assert!(matches!(bad.validate(), Err(Error::Data(_))));
        let ok = PseudoLabeling { labels: array![[0.25_f64, 0.75]], num_clusters: 2 };
        ok.validate().unwrap();
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempdir();
        let (vis, inf) = generate_dataset(&small_cfg()).unwrap();
        let pv = dir.join("vis.txt");
        let pi = dir.join("inf.txt");
        save_dataset(&vis, &pv).unwrap();
        save_dataset(&inf, &pi).unwrap();
        let vis2: ModalityDataset<f64> = load_dataset(&pv).unwrap();
        let inf2: ModalityDataset<f64> = load_dataset(&pi).unwrap();
        assert_eq!(vis, vis2);
        assert_eq!(inf, inf2);
    }

    #[test]
    fn save_load_round_trip_without_gt() {
        let dir = tempdir();
        let (mut vis, _) = generate_dataset(&small_cfg()).unwrap();
        vis.gt_ids = None;
        let p = dir.join("nogt.txt");
        save_dataset(&vis, &p).unwrap();
        let back: ModalityDataset<f64> = load_dataset(&p).unwrap();
        assert_eq!(vis, back);
    }

    #[test]
    fn load_reports_extra_row_line_number() {
        let dir = tempdir();
        let p = dir.join("extra.txt");
        std::fs::write(&p, "2 2 visible 0\n1.0 2.0\n3.0 4.0\n5.0 6.0\n").unwrap();
        match load_dataset::<f64>(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_reports_missing_rows() {
        let dir = tempdir();
        let p = dir.join("short.txt");
        std::fs::write(&p, "3 2 visible 0\n1.0 2.0\n").unwrap();
        match load_dataset::<f64>(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_names_bad_token_position() {
        let dir = tempdir();
        let p = dir.join("tok.txt");
        std::fs::write(&p, "1 3 infrared 0\n1.0 oops 3.0\n").unwrap();
        match load_dataset::<f64>(&p) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("token 2"), "msg: {msg}");
                assert!(msg.contains("oops"), "msg: {msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_bad_header_and_arity() {
        let dir = tempdir();
        let p = dir.join("hdr.txt");
        std::fs::write(&p, "2 2 thermal 0\n").unwrap();
        assert!(matches!(load_dataset::<f64>(&p), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&p, "1 3 visible 1\n1.0 2.0 3.0\n").unwrap();
        assert!(matches!(load_dataset::<f64>(&p), Err(Error::Parse { line: 2, .. })));
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "xmodal-data-test-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
