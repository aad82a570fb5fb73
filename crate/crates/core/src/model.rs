//! The trainable stack: a shared two-layer encoder producing
//! L2-normalized embeddings and two modality-specific affine classifier
//! heads, with hand-derived backward passes, SGD-with-momentum updates,
//! finite-difference gradient checking, and checkpoint I/O.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::simplex::softmax_rows;

const STREAM_MODEL_INIT: u64 = 10;
const CHECKPOINT_VERSION: u32 = 1;

/// Layer sizes of the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_in: usize,
    pub hidden: usize,
    pub d_emb: usize,
    pub c_v: usize,
    pub c_r: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 || self.c_v == 0 || self.c_r == 0 {
            return Err(Error::Config(format!("all layer sizes must be positive: {self:?}")));
        }
        if self.d_emb < 2 {
            return Err(Error::Config(format!("embedding dimension must be >= 2, got {}", self.d_emb)));
        }
        Ok(())
    }
}

/// Encoder parameters θ plus the two classifier heads φ_v, φ_r.
///
/// The encoder is input → hidden (affine + tanh) → embedding (affine),
/// with embeddings L2-normalized row-wise before any downstream use.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub w1: Array2<S>,
    pub b1: Array1<S>,
    pub w2: Array2<S>,
    pub b2: Array1<S>,
    pub head_v_w: Array2<S>,
    pub head_v_b: Array1<S>,
    pub head_r_w: Array2<S>,
    pub head_r_b: Array1<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Seeded initialization: weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(dims: ModelDims, seed_value: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = seed::stream(seed_value, &[STREAM_MODEL_INIT]);
        let mut draw = |rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                S::real(z * scale)
            })
        };
        let w1 = draw(dims.d_in, dims.hidden);
        let w2 = draw(dims.hidden, dims.d_emb);
        let head_v_w = draw(dims.d_emb, dims.c_v);
        let head_r_w = draw(dims.d_emb, dims.c_r);
        Ok(Self {
            w1,
            b1: Array1::zeros(dims.hidden),
            w2,
            b2: Array1::zeros(dims.d_emb),
            head_v_w,
            head_v_b: Array1::zeros(dims.c_v),
            head_r_w,
            head_r_b: Array1::zeros(dims.c_r),
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_in: self.w1.nrows(),
            hidden: self.w1.ncols(),
            d_emb: self.w2.ncols(),
            c_v: self.head_v_w.ncols(),
            c_r: self.head_r_w.ncols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        dims.validate()?;
        if self.b1.len() != dims.hidden
            || self.w2.nrows() != dims.hidden
            || self.b2.len() != dims.d_emb
            || self.head_v_w.nrows() != dims.d_emb
            || self.head_r_w.nrows() != dims.d_emb
            || self.head_v_b.len() != dims.c_v
            || self.head_r_b.len() != dims.c_r
        {
            return Err(Error::Data("parameter shapes are inconsistent".into()));
        }
        for (name, finite) in [
            ("encoder.w1", self.w1.iter().all(|v| v.is_finite())),
            ("encoder.b1", self.b1.iter().all(|v| v.is_finite())),
            ("encoder.w2", self.w2.iter().all(|v| v.is_finite())),
            ("encoder.b2", self.b2.iter().all(|v| v.is_finite())),
            ("head_v.w", self.head_v_w.iter().all(|v| v.is_finite())),
            ("head_v.b", self.head_v_b.iter().all(|v| v.is_finite())),
            ("head_r.w", self.head_r_w.iter().all(|v| v.is_finite())),
            ("head_r.b", self.head_r_b.iter().all(|v| v.is_finite())),
        ] {
            if !finite {
                return Err(Error::Data(format!("non-finite parameter in {name}")));
            }
        }
        Ok(())
    }

    fn head(&self, head: Modality) -> (&Array2<S>, &Array1<S>) {
        match head {
            Modality::Visible => (&self.head_v_w, &self.head_v_b),
            Modality::Infrared => (&self.head_r_w, &self.head_r_b),
        }
    }

    /// Number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.w1.len()
            + self.b1.len()
            + self.w2.len()
            + self.b2.len()
            + self.head_v_w.len()
            + self.head_v_b.len()
            + self.head_r_w.len()
            + self.head_r_b.len()
    }

    /// All parameters in the fixed block order, row-major within blocks.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.w1.iter().copied());
        out.extend(self.b1.iter().copied());
        out.extend(self.w2.iter().copied());
        out.extend(self.b2.iter().copied());
        out.extend(self.head_v_w.iter().copied());
        out.extend(self.head_v_b.iter().copied());
        out.extend(self.head_r_w.iter().copied());
        out.extend(self.head_r_b.iter().copied());
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_from_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Argument(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut cursor = 0;
        let mut take = |len: usize| {
            let s = &flat[cursor..cursor + len];
            cursor += len;
            s.to_vec()
        };
        self.w1 = Array2::from_shape_vec(self.w1.raw_dim(), take(self.w1.len())).unwrap();
        self.b1 = Array1::from_vec(take(self.b1.len()));
        self.w2 = Array2::from_shape_vec(self.w2.raw_dim(), take(self.w2.len())).unwrap();
        self.b2 = Array1::from_vec(take(self.b2.len()));
        self.head_v_w =
            Array2::from_shape_vec(self.head_v_w.raw_dim(), take(self.head_v_w.len())).unwrap();
        self.head_v_b = Array1::from_vec(take(self.head_v_b.len()));
        self.head_r_w =
            Array2::from_shape_vec(self.head_r_w.raw_dim(), take(self.head_r_w.len())).unwrap();
        self.head_r_b = Array1::from_vec(take(self.head_r_b.len()));
        Ok(())
    }
}

/// Gradient (or momentum-buffer) storage shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<S> {
    pub w1: Array2<S>,
    pub b1: Array1<S>,
    pub w2: Array2<S>,
    pub b2: Array1<S>,
    pub head_v_w: Array2<S>,
    pub head_v_b: Array1<S>,
    pub head_r_w: Array2<S>,
    pub head_r_b: Array1<S>,
}

impl<S: Scalar> ModelGrads<S> {
    pub fn zeros_like(params: &ModelParams<S>) -> Self {
        Self {
            w1: Array2::zeros(params.w1.raw_dim()),
            b1: Array1::zeros(params.b1.raw_dim()),
            w2: Array2::zeros(params.w2.raw_dim()),
            b2: Array1::zeros(params.b2.raw_dim()),
            head_v_w: Array2::zeros(params.head_v_w.raw_dim()),
            head_v_b: Array1::zeros(params.head_v_b.raw_dim()),
            head_r_w: Array2::zeros(params.head_r_w.raw_dim()),
            head_r_b: Array1::zeros(params.head_r_b.raw_dim()),
        }
    }

    fn head_mut(&mut self, head: Modality) -> (&mut Array2<S>, &mut Array1<S>) {
        match head {
            Modality::Visible => (&mut self.head_v_w, &mut self.head_v_b),
            Modality::Infrared => (&mut self.head_r_w, &mut self.head_r_b),
        }
    }

    /// Same order as [`ModelParams::flatten`].
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        out.extend(self.w1.iter().copied());
        out.extend(self.b1.iter().copied());
        out.extend(self.w2.iter().copied());
        out.extend(self.b2.iter().copied());
        out.extend(self.head_v_w.iter().copied());
        out.extend(self.head_v_b.iter().copied());
        out.extend(self.head_r_w.iter().copied());
        out.extend(self.head_r_b.iter().copied());
        out
    }

    fn check_finite(&self) -> Result<()> {
        for (name, finite) in [
            ("encoder.w1", self.w1.iter().all(|v| v.is_finite())),
            ("encoder.b1", self.b1.iter().all(|v| v.is_finite())),
            ("encoder.w2", self.w2.iter().all(|v| v.is_finite())),
            ("encoder.b2", self.b2.iter().all(|v| v.is_finite())),
            ("head_v.w", self.head_v_w.iter().all(|v| v.is_finite())),
            ("head_v.b", self.head_v_b.iter().all(|v| v.is_finite())),
            ("head_r.w", self.head_r_w.iter().all(|v| v.is_finite())),
            ("head_r.b", self.head_r_b.iter().all(|v| v.is_finite())),
        ] {
            if !finite {
                return Err(Error::Training(format!("non-finite gradient in {name}")));
            }
        }
        Ok(())
    }
}

/// SGD hyper-parameters.
#[derive(Debug, Clone)]
pub struct SgdConfig<S> {
    pub lr_stage1: S,
    pub lr_stage2: S,
    /// Momentum coefficient in [0, 1).
    pub momentum: S,
    /// Stage-1 epochs over which the learning rate ramps linearly to full.
    pub warmup_epochs: usize,
}

impl<S: Scalar> Default for SgdConfig<S> {
    fn default() -> Self {
        Self {
            lr_stage1: S::real(0.1),
            lr_stage2: S::real(0.01),
            momentum: S::real(0.9),
            warmup_epochs: 5,
        }
    }
}

impl<S: Scalar> SgdConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_stage1 > S::zero()) || !(self.lr_stage2 > S::zero()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.momentum >= S::zero() && self.momentum < S::one()) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        Ok(())
    }

    /// Linear warm-up multiplier for stage-1 epoch `epoch` (0-based):
    /// ramps from 1/warmup_epochs up to 1.
    pub fn warmup_factor(&self, epoch: usize) -> S {
        if self.warmup_epochs == 0 || epoch + 1 >= self.warmup_epochs {
            return S::one();
        }
        S::real((epoch + 1) as f64 / self.warmup_epochs as f64)
    }
}

/// Momentum buffers; one per trainer, reused across steps.
#[derive(Debug, Clone)]
pub struct SgdState<S> {
    momentum: S,
    buffers: ModelGrads<S>,
}

impl<S: Scalar> SgdState<S> {
    pub fn new(params: &ModelParams<S>, momentum: S) -> Self {
        Self { momentum, buffers: ModelGrads::zeros_like(params) }
    }

    /// `buffer ← momentum·buffer + grad; param ← param − lr·buffer`.
    pub fn step(&mut self, params: &mut ModelParams<S>, grads: &ModelGrads<S>, lr: S) {
        let mu = self.momentum;
        macro_rules! update {
            ($field:ident) => {
                ndarray::Zip::from(&mut self.buffers.$field)
                    .and(&grads.$field)
                    .for_each(|buf, &g| *buf = mu * *buf + g);
                ndarray::Zip::from(&mut params.$field)
                    .and(&self.buffers.$field)
                    .for_each(|p, &buf| *p = *p - lr * buf);
            };
        }
        update!(w1);
        update!(b1);
        update!(w2);
        update!(b2);
        update!(head_v_w);
        update!(head_v_b);
        update!(head_r_w);
        update!(head_r_b);
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeCache<S> {
    pub input: Array2<S>,
    /// tanh activations of the hidden layer.
    pub z1: Array2<S>,
    /// Raw (pre-normalization) embeddings.
    pub raw: Array2<S>,
    /// L2-normalized embeddings (zero rows passed through).
    pub embeddings: Array2<S>,
    /// Row norms of the raw embeddings.
    pub norms: Vec<S>,
    /// Rows whose raw embedding was exactly zero and was left
    /// unnormalized.
    pub zero_rows: Vec<bool>,
}

/// Encoder forward pass with cached intermediates.
pub fn encode<S: Scalar>(params: &ModelParams<S>, x: ArrayView2<S>) -> Result<EncodeCache<S>> {
    let dims = params.dims();
    if x.ncols() != dims.d_in {
        return Err(Error::Argument(format!(
            "input has {} columns, encoder expects {}",
            x.ncols(),
            dims.d_in
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("input contains non-finite values".into()));
    }
    let input = x.to_owned();
    let mut z1 = input.dot(&params.w1);
    z1 += &params.b1;
    z1.mapv_inplace(|a| a.tanh());
    let mut raw = z1.dot(&params.w2);
    raw += &params.b2;

    let b = raw.nrows();
    let mut embeddings = raw.clone();
    let mut norms = Vec::with_capacity(b);
    let mut zero_rows = Vec::with_capacity(b);
    for mut row in embeddings.rows_mut() {
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        norms.push(norm);
        if norm == S::zero() {
            zero_rows.push(true);
        } else {
            zero_rows.push(false);
            row.mapv_inplace(|v| v / norm);
        }
    }
    Ok(EncodeCache { input, z1, raw, embeddings, norms, zero_rows })
}

/// Classifier logits and softmax probabilities for embeddings under one
/// head.
pub fn apply_head<S: Scalar>(
    params: &ModelParams<S>,
    embeddings: ArrayView2<S>,
    head: Modality,
) -> (Array2<S>, Array2<S>) {
    let (w, b) = params.head(head);
    let mut logits = embeddings.dot(w);
    logits += b;
    let probs = softmax_rows(logits.view());
    (logits, probs)
}

/// Full forward pass: L2-normalized embeddings and class probabilities
/// under the requested head.
pub fn forward<S: Scalar>(
    params: &ModelParams<S>,
    x: ArrayView2<S>,
    head: Modality,
) -> Result<(Array2<S>, Array2<S>)> {
    let cache = encode(params, x)?;
    let (_, probs) = apply_head(params, cache.embeddings.view(), head);
    Ok((cache.embeddings, probs))
}

/// One forward request inside a training step: inputs plus the head
/// their predictions come from.
#[derive(Debug, Clone)]
pub struct BatchPart<S> {
    pub x: Array2<S>,
    pub head: Modality,
}

/// What the loss closure sees per part.
#[derive(Debug, Clone)]
pub struct PartForward<S> {
    pub embeddings: Array2<S>,
    pub probs: Array2<S>,
}

/// Upstream gradients the loss closure returns per part; either tensor
/// may be absent when the part does not enter that term.
#[derive(Debug, Clone, Default)]
pub struct PartGrads<S> {
    /// Gradient w.r.t. this part's head logits.
    pub d_logits: Option<Array2<S>>,
    /// Gradient w.r.t. this part's normalized embeddings.
    pub d_embeddings: Option<Array2<S>>,
}

/// Loss value plus upstream gradients, one entry per batch part.
#[derive(Debug, Clone)]
pub struct ClosureResult<S> {
    pub value: S,
    pub part_grads: Vec<PartGrads<S>>,
}

fn forward_parts<S: Scalar>(
    params: &ModelParams<S>,
    parts: &[BatchPart<S>],
) -> Result<(Vec<EncodeCache<S>>, Vec<PartForward<S>>)> {
    let mut caches = Vec::with_capacity(parts.len());
    let mut fwds = Vec::with_capacity(parts.len());
    for part in parts {
        let cache = encode(params, part.x.view())?;
        let (_, probs) = apply_head(params, cache.embeddings.view(), part.head);
        fwds.push(PartForward { embeddings: cache.embeddings.clone(), probs });
        caches.push(cache);
    }
    Ok((caches, fwds))
}

/// Runs the forward passes and evaluates the closure's loss value only.
pub fn evaluate_loss<S: Scalar, F>(params: &ModelParams<S>, parts: &[BatchPart<S>], loss: &F) -> Result<S>
where
    F: Fn(&[PartForward<S>]) -> Result<ClosureResult<S>>,
{
    let (_, fwds) = forward_parts(params, parts)?;
    Ok(loss(&fwds)?.value)
}

fn backward_part<S: Scalar>(
    params: &ModelParams<S>,
    head: Modality,
    cache: &EncodeCache<S>,
    part_grads: &PartGrads<S>,
    grads: &mut ModelGrads<S>,
) -> Result<()> {
    let b = cache.embeddings.nrows();
    let d_emb = cache.embeddings.ncols();

    let mut d_e = match &part_grads.d_embeddings {
        Some(d) => {
            if d.dim() != cache.embeddings.dim() {
                return Err(Error::Training(format!(
                    "embedding gradient shape {:?} does not match batch {:?}",
                    d.dim(),
                    cache.embeddings.dim()
                )));
            }
            d.clone()
        }
        None => Array2::zeros((b, d_emb)),
    };

    if let Some(d_logits) = &part_grads.d_logits {
        let (w, _) = params.head(head);
        if d_logits.nrows() != b || d_logits.ncols() != w.ncols() {
            return Err(Error::Training(format!(
                "logit gradient shape {:?} does not match batch {b}x{}",
                d_logits.dim(),
                w.ncols()
            )));
        }
        let (gw, gb) = grads.head_mut(head);
        *gw += &cache.embeddings.t().dot(d_logits);
        *gb += &d_logits.sum_axis(Axis(0));
        d_e += &d_logits.dot(&w.t());
    }

    // Through the row normalization e = r/‖r‖:
    // dr = (de − ê·(ê ⋅ de)) / ‖r‖, identity for flagged zero rows.
    let mut d_raw = Array2::zeros((b, d_emb));
    for i in 0..b {
        if cache.zero_rows[i] {
            d_raw.row_mut(i).assign(&d_e.row(i));
            continue;
        }
        let e = cache.embeddings.row(i);
        let d = d_e.row(i);
        let along: S = e.iter().zip(d.iter()).map(|(&ev, &dv)| ev * dv).sum();
        let inv_norm = S::one() / cache.norms[i];
        for j in 0..d_emb {
            d_raw[[i, j]] = (d[[j]] - e[[j]] * along) * inv_norm;
        }
    }

    grads.w2 += &cache.z1.t().dot(&d_raw);
    grads.b2 += &d_raw.sum_axis(Axis(0));
    let d_z1 = d_raw.dot(&params.w2.t());
    let mut d_a1 = d_z1;
    ndarray::Zip::from(&mut d_a1).and(&cache.z1).for_each(|g, &z| {
        *g = *g * (S::one() - z * z);
    });
    grads.w1 += &cache.input.t().dot(&d_a1);
    grads.b1 += &d_a1.sum_axis(Axis(0));
    Ok(())
}

/// Full-model analytic gradients of a composed loss.
///
/// Runs every part's forward pass, lets the closure assemble the loss and
/// its upstream gradients, and chains them back through normalization,
/// tanh, and the affine layers.
pub fn analytic_gradients<S: Scalar, F>(
    params: &ModelParams<S>,
    parts: &[BatchPart<S>],
    loss: &F,
) -> Result<(S, ModelGrads<S>)>
where
    F: Fn(&[PartForward<S>]) -> Result<ClosureResult<S>>,
{
    let (caches, fwds) = forward_parts(params, parts)?;
    let result = loss(&fwds)?;
    if result.part_grads.len() != parts.len() {
        return Err(Error::Training(format!(
            "loss closure returned {} gradient sets for {} parts",
            result.part_grads.len(),
            parts.len()
        )));
    }
    if !result.value.is_finite() {
        return Err(Error::Training("loss value is not finite".into()));
    }
    let mut grads = ModelGrads::zeros_like(params);
    for ((part, cache), pg) in parts.iter().zip(&caches).zip(&result.part_grads) {
        backward_part(params, part.head, cache, pg, &mut grads)?;
    }
    grads.check_finite()?;
    Ok((result.value, grads))
}

/// One SGD step: forward, closure, backward, momentum update.
/// Returns the batch loss before the step.
pub fn backward_and_step<S: Scalar, F>(
    params: &mut ModelParams<S>,
    parts: &[BatchPart<S>],
    loss: &F,
    state: &mut SgdState<S>,
    lr: S,
) -> Result<S>
where
    F: Fn(&[PartForward<S>]) -> Result<ClosureResult<S>>,
{
    if !(lr >= S::zero()) {
        return Err(Error::Argument(format!("learning rate must be >= 0, got {lr}")));
    }
    let (value, grads) = analytic_gradients(params, parts, loss)?;
    state.step(params, &grads, lr);
    Ok(value)
}

/// Central-difference gradient check over every parameter.
///
/// Returns `max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<S: Scalar, F>(
    params: &ModelParams<S>,
    parts: &[BatchPart<S>],
    loss: &F,
    step: S,
) -> Result<S>
where
    F: Fn(&[PartForward<S>]) -> Result<ClosureResult<S>>,
{
    if !(step > S::zero()) {
        return Err(Error::Argument(format!("step must be positive, got {step}")));
    }
    let (_, analytic) = analytic_gradients(params, parts, loss)?;
    let analytic = analytic.flatten();
    let numeric = numeric_gradients(params, parts, loss, step)?;
    let floor = S::real(1e-8);
    let mut worst = S::zero();
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let rel = (a - n).abs() / floor.max(a.abs() + n.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Central-difference gradients over every parameter, in
/// [`ModelParams::flatten`] order.
pub fn numeric_gradients<S: Scalar, F>(
    params: &ModelParams<S>,
    parts: &[BatchPart<S>],
    loss: &F,
    step: S,
) -> Result<Vec<S>>
where
    F: Fn(&[PartForward<S>]) -> Result<ClosureResult<S>>,
{
    let base = params.flatten();
    let mut probe = params.clone();
    let mut flat = base.clone();
    let mut numeric = Vec::with_capacity(base.len());
    let two_step = step + step;
    for i in 0..base.len() {
        flat[i] = base[i] + step;
        probe.assign_from_flat(&flat)?;
        let plus = evaluate_loss(&probe, parts, loss)?;
        flat[i] = base[i] - step;
        probe.assign_from_flat(&flat)?;
        let minus = evaluate_loss(&probe, parts, loss)?;
        flat[i] = base[i];
        numeric.push((plus - minus) / two_step);
    }
    Ok(numeric)
}

const BLOCK_ORDER: [&str; 8] = [
    "encoder.w1",
    "encoder.b1",
    "encoder.w2",
    "encoder.b2",
    "head_v.w",
    "head_v.b",
    "head_r.w",
    "head_r.b",
];

/// Writes a checkpoint: versioned header, layer dims, then each block as
/// a `block name dims...` line followed by its row-major values with 17
/// significant digits.
pub fn save_checkpoint<S: Scalar>(params: &ModelParams<S>, path: &Path) -> Result<()> {
    params.validate()?;
    let file = File::create(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let dims = params.dims();
    writeln!(w, "xmodal-checkpoint {CHECKPOINT_VERSION}")?;
    writeln!(w, "dims {} {} {} {} {}", dims.d_in, dims.hidden, dims.d_emb, dims.c_v, dims.c_r)?;
    let blocks: [(&str, Vec<usize>, Vec<S>); 8] = [
        ("encoder.w1", vec![dims.d_in, dims.hidden], params.w1.iter().copied().collect()),
        ("encoder.b1", vec![dims.hidden], params.b1.to_vec()),
        ("encoder.w2", vec![dims.hidden, dims.d_emb], params.w2.iter().copied().collect()),
        ("encoder.b2", vec![dims.d_emb], params.b2.to_vec()),
        ("head_v.w", vec![dims.d_emb, dims.c_v], params.head_v_w.iter().copied().collect()),
        ("head_v.b", vec![dims.c_v], params.head_v_b.to_vec()),
        ("head_r.w", vec![dims.d_emb, dims.c_r], params.head_r_w.iter().copied().collect()),
        ("head_r.b", vec![dims.c_r], params.head_r_b.to_vec()),
    ];
    let mut line = String::new();
    for (name, shape, values) in blocks {
        line.clear();
        write!(line, "block {name}").expect("string write");
        for d in shape {
            write!(line, " {d}").expect("string write");
        }
        writeln!(w, "{line}")?;
        line.clear();
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            write!(line, "{:.16e}", v.to_f64_lossy()).expect("string write");
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]; the round trip is
/// exact.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ModelParams<S>> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let mut line_no = 0usize;
    let next_line = |lines: &mut std::io::Lines<BufReader<File>>, line_no: &mut usize| -> Result<String> {
        *line_no += 1;
        match lines.next() {
            Some(l) => Ok(l?),
            None => Err(Error::Parse { line: *line_no, msg: "unexpected end of file".into() }),
        }
    };

    let header = next_line(&mut lines, &mut line_no)?;
    let htok: Vec<&str> = header.split_whitespace().collect();
    if htok.len() != 2 || htok[0] != "xmodal-checkpoint" {
        return Err(Error::Parse { line: 1, msg: format!("bad checkpoint header '{header}'") });
    }
    let version: u32 = htok[1]
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: format!("bad version '{}'", htok[1]) })?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }

    let dims_line = next_line(&mut lines, &mut line_no)?;
    let dtok: Vec<&str> = dims_line.split_whitespace().collect();
    if dtok.len() != 6 || dtok[0] != "dims" {
        return Err(Error::Parse { line: 2, msg: format!("bad dims line '{dims_line}'") });
    }
    let mut parsed = [0usize; 5];
    for (slot, tok) in parsed.iter_mut().zip(&dtok[1..]) {
        *slot = tok
            .parse()
            .map_err(|_| Error::Parse { line: 2, msg: format!("bad dimension '{tok}'") })?;
    }
    let dims = ModelDims { d_in: parsed[0], hidden: parsed[1], d_emb: parsed[2], c_v: parsed[3], c_r: parsed[4] };
    dims.validate().map_err(|e| Error::Parse { line: 2, msg: e.to_string() })?;

    let expected_shapes: [Vec<usize>; 8] = [
        vec![dims.d_in, dims.hidden],
        vec![dims.hidden],
        vec![dims.hidden, dims.d_emb],
        vec![dims.d_emb],
        vec![dims.d_emb, dims.c_v],
        vec![dims.c_v],
        vec![dims.d_emb, dims.c_r],
        vec![dims.c_r],
    ];
    let mut block_values: Vec<Vec<S>> = Vec::with_capacity(8);
    for (name, shape) in BLOCK_ORDER.iter().zip(&expected_shapes) {
        let header = next_line(&mut lines, &mut line_no)?;
        let tok: Vec<&str> = header.split_whitespace().collect();
        if tok.len() != 2 + shape.len() || tok[0] != "block" || tok[1] != *name {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected block '{name}' with {} dims, found '{header}'", shape.len()),
            });
        }
        for (want, got) in shape.iter().zip(&tok[2..]) {
            let g: usize = got.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad shape token '{got}'"),
            })?;
            if g != *want {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("block '{name}' has shape token {g}, dims imply {want}"),
                });
            }
        }
        let values_line = next_line(&mut lines, &mut line_no)?;
        let want_len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(want_len);
        for (t, tok) in values_line.split_whitespace().enumerate() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("token {}: invalid number '{tok}'", t + 1),
            })?;
            values.push(S::real(v));
        }
        if values.len() != want_len {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("block '{name}' has {} values, expected {want_len}", values.len()),
            });
        }
        block_values.push(values);
    }
    for extra in lines {
        line_no += 1;
        if !extra?.trim().is_empty() {
            return Err(Error::Parse { line: line_no, msg: "expected end of file".into() });
        }
    }

    let mut it = block_values.into_iter();
    let params = ModelParams {
        w1: Array2::from_shape_vec((dims.d_in, dims.hidden), it.next().unwrap()).unwrap(),
        b1: Array1::from_vec(it.next().unwrap()),
        w2: Array2::from_shape_vec((dims.hidden, dims.d_emb), it.next().unwrap()).unwrap(),
        b2: Array1::from_vec(it.next().unwrap()),
        head_v_w: Array2::from_shape_vec((dims.d_emb, dims.c_v), it.next().unwrap()).unwrap(),
        head_v_b: Array1::from_vec(it.next().unwrap()),
        head_r_w: Array2::from_shape_vec((dims.d_emb, dims.c_r), it.next().unwrap()).unwrap(),
        head_r_b: Array1::from_vec(it.next().unwrap()),
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims { d_in: 5, hidden: 7, d_emb: 4, c_v: 3, c_r: 3 }
    }

    fn random_batch(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((b, d), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// A stage-1-style closure: CE + triplet per modality part.
    fn reid_closure(
        labels_per_part: Vec<Vec<usize>>,
        margin: f64,
    ) -> impl Fn(&[PartForward<f64>]) -> Result<ClosureResult<f64>> {
        move |fwds: &[PartForward<f64>]| {
            let mut value = 0.0;
            let mut part_grads = Vec::new();
            for (fwd, labels) in fwds.iter().zip(&labels_per_part) {
                let reid = losses::reid_loss(
                    fwd.embeddings.view(),
                    fwd.probs.view(),
                    labels,
                    margin,
                )?;
                value += reid.value;
                part_grads.push(PartGrads {
                    d_logits: Some(reid.grad_logits),
                    d_embeddings: Some(reid.grad_embeddings),
                });
            }
            Ok(ClosureResult { value, part_grads })
        }
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut params = ModelParams::<f64>::init(dims(), 1).unwrap();
        params.head_v_w.fill(0.0);
        params.head_v_b.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_batch(6, 5, &mut rng);
        let (_, probs) = forward(&params, x.view(), Modality::Visible).unwrap();
        for &p in probs.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let params = ModelParams::<f64>::init(dims(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_batch(8, 5, &mut rng);
        let (_, probs) = forward(&params, x.view(), Modality::Infrared).unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let params = ModelParams::<f64>::init(dims(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_batch(10, 5, &mut rng);
        let cache = encode(&params, x.view()).unwrap();
        for (i, row) in cache.embeddings.rows().into_iter().enumerate() {
            assert!(!cache.zero_rows[i]);
            let norm: f64 = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_raw_embedding_rows_are_flagged_and_passed_through() {
        let mut params = ModelParams::<f64>::init(dims(), 7).unwrap();
        params.w2.fill(0.0);
        params.b2.fill(0.0);
        let x = Array2::from_elem((3, 5), 0.4);
        let cache = encode(&params, x.view()).unwrap();
        assert!(cache.zero_rows.iter().all(|&z| z));
        assert!(cache.embeddings.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn duplicated_inputs_produce_identical_outputs() {
        let params = ModelParams::<f64>::init(dims(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let row = random_batch(1, 5, &mut rng);
        let mut x = Array2::zeros((2, 5));
        x.row_mut(0).assign(&row.row(0));
        x.row_mut(1).assign(&row.row(0));
        let (emb, probs) = forward(&params, x.view(), Modality::Visible).unwrap();
        assert_eq!(emb.row(0), emb.row(1));
        assert_eq!(probs.row(0), probs.row(1));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let params = ModelParams::<f64>::init(dims(), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_batch(4, 5, &mut rng);
        let (e1, p1) = forward(&params, x.view(), Modality::Visible).unwrap();
        let (e2, p2) = forward(&params, x.view(), Modality::Visible).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn forward_rejects_wrong_width_and_non_finite_input() {
        let params = ModelParams::<f64>::init(dims(), 12).unwrap();
        let narrow = Array2::<f64>::zeros((2, 4));
        assert!(forward(&params, narrow.view(), Modality::Visible).is_err());
        let bad = array![[f64::NAN, 0.0, 0.0, 0.0, 0.0]];
        assert!(forward(&params, bad.view(), Modality::Visible).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut params = ModelParams::<f64>::init(dims(), 13).unwrap();
        let before = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let parts = vec![
            BatchPart { x: random_batch(6, 5, &mut rng), head: Modality::Visible },
            BatchPart { x: random_batch(6, 5, &mut rng), head: Modality::Infrared },
        ];
        let labels = vec![vec![0, 0, 1, 1, 2, 2], vec![0, 1, 1, 2, 2, 0]];
        let closure = reid_closure(labels, 0.3);
        let mut state = SgdState::new(&params, 0.9);
        backward_and_step(&mut params, &parts, &closure, &mut state, 0.0).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn single_step_decreases_the_batch_loss() {
        for seed_value in 0..20u64 {
            let mut params = ModelParams::<f64>::init(dims(), seed_value).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed_value);
            let parts = vec![
                BatchPart { x: random_batch(8, 5, &mut rng), head: Modality::Visible },
                BatchPart { x: random_batch(8, 5, &mut rng), head: Modality::Infrared },
            ];
            let labels = vec![
                (0..8).map(|i| i % 3).collect::<Vec<_>>(),
                (0..8).map(|i| (i + 1) % 3).collect::<Vec<_>>(),
            ];
            let closure = reid_closure(labels, 0.3);
            let before = evaluate_loss(&params, &parts, &closure).unwrap();
            let mut state = SgdState::new(&params, 0.0);
            backward_and_step(&mut params, &parts, &closure, &mut state, 1e-3).unwrap();
            let after = evaluate_loss(&params, &parts, &closure).unwrap();
            assert!(
                after < before,
                "seed {seed_value}: loss went {before} -> {after}"
            );
        }
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let params = ModelParams::<f64>::init(dims(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let parts = vec![
            BatchPart { x: random_batch(10, 5, &mut rng), head: Modality::Visible },
            BatchPart { x: random_batch(10, 5, &mut rng), head: Modality::Infrared },
        ];
        let labels = vec![
            (0..10).map(|i| i % 3).collect::<Vec<_>>(),
            (0..10).map(|i| (i + 2) % 3).collect::<Vec<_>>(),
        ];
        let closure = reid_closure(labels, 0.3);
        let err = grad_check(&params, &parts, &closure, 1e-5).unwrap();
        assert!(err <= 1e-4, "gradient check failed with max relative error {err}");
    }

    #[test]
    fn grad_check_detects_a_sabotaged_coordinate() {
        let params = ModelParams::<f64>::init(dims(), 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let parts = vec![BatchPart { x: random_batch(6, 5, &mut rng), head: Modality::Visible }];
        let labels = vec![vec![0, 1, 2, 0, 1, 2]];
        let closure = reid_closure(labels, 0.3);
        let (_, analytic) = analytic_gradients(&params, &parts, &closure).unwrap();
        let mut sabotaged = analytic.flatten();
        // Zero the first encoder weight's gradient and re-compare.
        sabotaged[0] = 0.0;
        let numeric = numeric_gradients(&params, &parts, &closure, 1e-5).unwrap();
        let rel = (sabotaged[0] - numeric[0]).abs()
            / f64::max(1e-8, sabotaged[0].abs() + numeric[0].abs());
        assert!(rel > 0.5, "sabotage went undetected: rel {rel}");
    }

    #[test]
    fn unused_head_contributes_zero_gradient_error() {
        let params = ModelParams::<f64>::init(dims(), 25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        // Only the visible head is exercised.
        let parts = vec![BatchPart { x: random_batch(6, 5, &mut rng), head: Modality::Visible }];
        let labels = vec![vec![0, 1, 2, 0, 1, 2]];
        let closure = reid_closure(labels, 0.3);
        let (_, analytic) = analytic_gradients(&params, &parts, &closure).unwrap();
        assert!(analytic.head_r_w.iter().all(|&g| g == 0.0));
        assert!(analytic.head_r_b.iter().all(|&g| g == 0.0));
        let err = grad_check(&params, &parts, &closure, 1e-5).unwrap();
        assert!(err <= 1e-4);
    }

    #[test]
    fn momentum_update_matches_hand_computation() {
        let mut params = ModelParams::<f64>::init(dims(), 27).unwrap();
        let p0 = params.w1[[0, 0]];
        let mut grads = ModelGrads::zeros_like(&params);
        grads.w1[[0, 0]] = 2.0;
        let mut state = SgdState::new(&params, 0.9);
        let lr = 0.1;
        state.step(&mut params, &grads, lr);
        // buffer = 2, p1 = p0 − 0.1·2
        assert!((params.w1[[0, 0]] - (p0 - 0.2)).abs() < 1e-15);
        state.step(&mut params, &grads, lr);
        // buffer = 0.9·2 + 2 = 3.8, p2 = p1 − 0.38
        assert!((params.w1[[0, 0]] - (p0 - 0.2 - 0.38)).abs() < 1e-15);
    }

    #[test]
    fn warmup_factor_ramps_linearly_then_saturates() {
        let sgd = SgdConfig { warmup_epochs: 5, ..SgdConfig::<f64>::default() };
        for (epoch, want) in [(0, 0.2), (1, 0.4), (2, 0.6), (3, 0.8), (4, 1.0), (9, 1.0)] {
            assert!((sgd.warmup_factor(epoch) - want).abs() < 1e-15);
        }
        let no_warmup = SgdConfig { warmup_epochs: 0, ..SgdConfig::<f64>::default() };
        assert_eq!(no_warmup.warmup_factor(0), 1.0);
    }

    #[test]
    fn sgd_config_validation() {
        assert!(SgdConfig::<f64>::default().validate().is_ok());
        assert!(SgdConfig { lr_stage1: 0.0, ..SgdConfig::<f64>::default() }.validate().is_err());
        assert!(SgdConfig { momentum: 1.0, ..SgdConfig::<f64>::default() }.validate().is_err());
        assert!(SgdConfig { momentum: -0.1, ..SgdConfig::<f64>::default() }.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let params = ModelParams::<f64>::init(dims(), 31).unwrap();
        let dir = std::env::temp_dir().join(format!("xmodal-model-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.txt");
        save_checkpoint(&params, &path).unwrap();
        let back: ModelParams<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(params.flatten(), back.flatten());
        assert_eq!(params, back);
    }

    #[test]
    fn checkpoint_loader_reports_corruption_with_line_numbers() {
        let dir = std::env::temp_dir().join(format!("xmodal-model-test2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.txt");

        std::fs::write(&path, "not-a-checkpoint 1\n").unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Parse { line: 1, .. })));

        std::fs::write(&path, "xmodal-checkpoint 99\n").unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Parse { line: 1, .. })));

        let params = ModelParams::<f64>::init(dims(), 32).unwrap();
        let good = dir.join("good.txt");
        save_checkpoint(&params, &good).unwrap();
        let mut text = std::fs::read_to_string(&good).unwrap();
        // Corrupt a value on line 4 (the encoder.w1 values line).
        text = text
            .lines()
            .enumerate()
            .map(|(i, l)| if i == 3 { "1.0 broken".to_string() } else { l.to_string() })
            .collect::<Vec<_>>()
            .join("\n");
        std::fs::write(&path, text).unwrap();
        match load_checkpoint::<f64>(&path) {
            Err(Error::Parse { line: 4, msg }) => assert!(msg.contains("broken"), "msg: {msg}"),
            other => panic!("expected parse error at line 4, got {other:?}"),
        }
    }

    #[test]
    fn flatten_assign_round_trip() {
        let params = ModelParams::<f64>::init(dims(), 33).unwrap();
        let flat = params.flatten();
        assert_eq!(flat.len(), params.num_params());
        let mut other = ModelParams::<f64>::init(dims(), 34).unwrap();
        other.assign_from_flat(&flat).unwrap();
        assert_eq!(other, params);
        assert!(other.assign_from_flat(&flat[1..]).is_err());
    }
}
