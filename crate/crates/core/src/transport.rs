//! Entropy-regularized optimal-transport label assignment.
//!
//! Given a row-stochastic prediction matrix P over C counterpart-modality
//! clusters, the assignment plan Q minimizes
//!
//! ```text
//! ⟨Q, −log P⟩ + (1/λ)·KL(Q ‖ αβᵀ)     s.t.  Q𝟙 = α,  Qᵀ𝟙 = β
//! ```
//!
//! with uniform marginals α = 1/N and β = 1/C: every sample carries equal
//! mass and every cluster receives an equal share. The minimizer has the
//! scaling form Q = diag(u)·K·diag(v) with kernel K = P^λ, found by
//! Sinkhorn-Knopp iteration. At the working λ = 25, K underflows in direct
//! arithmetic, so the solver runs entirely in the log domain.

use ndarray::{Array1, Array2, ArrayView2};

use crate::data::argmax_lowest;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::simplex::PROB_FLOOR;

/// Solver parameters for one transport problem.
#[derive(Debug, Clone)]
pub struct TransportConfig<S> {
    /// Regularization trade-off λ > 0; larger values sharpen the plan
    /// toward the unregularized assignment.
    pub lambda: S,
    /// Stopping tolerance on the L∞ marginal residual.
    pub tol: S,
    /// Iteration cap; hitting it is reported, not an error.
    pub max_iter: usize,
}

impl<S: Scalar> Default for TransportConfig<S> {
    fn default() -> Self {
        Self { lambda: S::real(25.0), tol: S::real(1e-9), max_iter: 1000 }
    }
}

impl<S: Scalar> TransportConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > S::zero()) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tol > S::zero()) || !self.tol.is_finite() {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// A solved transport plan with its marginals and solver diagnostics.
#[derive(Debug, Clone)]
pub struct TransportPlan<S> {
    /// N×C nonnegative plan Q.
    pub plan: Array2<S>,
    /// Prescribed row marginal α (uniform 1/N).
    pub row_marginal: Array1<S>,
    /// Prescribed column marginal β (uniform 1/C).
    pub col_marginal: Array1<S>,
    /// Full row+column sweeps performed.
    pub iterations_used: usize,
    /// Achieved L∞ marginal residual.
    pub residual: S,
    /// Whether `residual ≤ tol` was reached within the iteration cap.
    pub converged: bool,
    /// Log row scaling (log u); together with the kernel and `log_v`
    /// this reconstructs the plan as Q_ij = u_i·K_ij·v_j.
    pub log_u: Array1<S>,
    /// Log column scaling (log v).
    pub log_v: Array1<S>,
}

impl<S: Scalar> TransportPlan<S> {
    /// Checks nonnegativity, unit total mass, and — for converged plans —
    /// the marginal residual bound.
    pub fn validate(&self, tol: S) -> Result<()> {
        if self.plan.iter().any(|&q| q < S::zero() || !q.is_finite()) {
            return Err(Error::Data("plan has negative or non-finite entries".into()));
        }
        let mass = self.plan.sum();
        if (mass - S::one()).abs() > S::real(1e-9) {
            return Err(Error::Data(format!("plan mass {mass} is not 1")));
        }
        if self.converged && self.marginal_residual() > tol {
            return Err(Error::Data(format!(
                "converged plan has marginal residual {} > {tol}",
                self.marginal_residual()
            )));
        }
        Ok(())
    }

    /// L∞ distance of the plan's realized marginals from the prescribed ones.
    pub fn marginal_residual(&self) -> S {
        let mut worst = S::zero();
        for (i, row) in self.plan.rows().into_iter().enumerate() {
            worst = worst.max((row.sum() - self.row_marginal[i]).abs());
        }
        for (j, col) in self.plan.columns().into_iter().enumerate() {
            worst = worst.max((col.sum() - self.col_marginal[j]).abs());
        }
        worst
    }
}

/// Log-sum-exp with max shift; `-inf` inputs are handled exactly.
fn logsumexp<S: Scalar, I: Iterator<Item = S> + Clone>(terms: I) -> S {
    let max = terms.clone().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return max;
    }
    let sum: S = terms.map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

/// Solves the entropic assignment problem for one prediction matrix.
///
/// Runs log-domain Sinkhorn-Knopp until the L∞ marginal residual drops to
/// `cfg.tol` or `cfg.max_iter` sweeps elapse; a residual above tolerance
/// is reported through [`TransportPlan::converged`] rather than an error.
pub fn sinkhorn_plan<S: Scalar>(p: ArrayView2<S>, cfg: &TransportConfig<S>) -> Result<TransportPlan<S>> {
    cfg.validate()?;
    let (n, c) = p.dim();
    if n == 0 || c == 0 {
        return Err(Error::Argument(format!("prediction matrix must be non-empty, got {n}x{c}")));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("prediction matrix has non-finite entries".into()));
    }
    if p.iter().any(|&v| v < S::zero()) {
        return Err(Error::Data("prediction matrix has negative entries".into()));
    }

    let floor = S::real(PROB_FLOOR);
    let log_kernel = p.mapv(|v| cfg.lambda * v.max(floor).ln());
    let alpha = S::one() / S::real(n as f64);
    let beta = S::one() / S::real(c as f64);
    let log_alpha = alpha.ln();
    let log_beta = beta.ln();

    let mut log_u = Array1::<S>::zeros(n);
    let mut log_v = Array1::<S>::zeros(c);
    let mut iterations_used = 0;
    let mut residual = S::infinity();
    let mut converged = false;

    while iterations_used < cfg.max_iter {
        for i in 0..n {
            let lse = logsumexp((0..c).map(|j| log_kernel[[i, j]] + log_v[j]));
            log_u[i] = log_alpha - lse;
        }
        for j in 0..c {
            let lse = logsumexp((0..n).map(|i| log_kernel[[i, j]] + log_u[i]));
            log_v[j] = log_beta - lse;
        }
        iterations_used += 1;

        // Column sums are exact right after the v update; the residual is
        // dominated by the row sums.
        let mut worst = S::zero();
        for i in 0..n {
            let row_sum: S = (0..c).map(|j| (log_u[i] + log_kernel[[i, j]] + log_v[j]).exp()).sum();
            worst = worst.max((row_sum - alpha).abs());
        }
        residual = worst;
        if residual <= cfg.tol {
            converged = true;
            break;
        }
    }

    let plan = Array2::from_shape_fn((n, c), |(i, j)| {
        (log_u[i] + log_kernel[[i, j]] + log_v[j]).exp()
    });
    Ok(TransportPlan {
        plan,
        row_marginal: Array1::from_elem(n, alpha),
        col_marginal: Array1::from_elem(c, beta),
        iterations_used,
        residual,
        converged,
        log_u,
        log_v,
    })
}

/// Transport objective `⟨Q, −log P⟩ + (1/λ)·Σ Q_ij·log(Q_ij/(α_i·β_j))`
/// with uniform marginals and the convention 0·log 0 = 0.
pub fn ot_objective<S: Scalar>(plan: ArrayView2<S>, p: ArrayView2<S>, lambda: S) -> Result<S> {
    if plan.dim() != p.dim() {
        return Err(Error::Argument(format!(
            "plan shape {:?} does not match prediction shape {:?}",
            plan.dim(),
            p.dim()
        )));
    }
    let (n, c) = plan.dim();
    let floor = S::real(PROB_FLOOR);
    let prior = S::one() / S::real((n * c) as f64);
    let mut linear = S::zero();
    let mut kl = S::zero();
    for (&q, &pv) in plan.iter().zip(p.iter()) {
        linear = linear - q * pv.max(floor).ln();
        if q > S::zero() {
            kl = kl + q * (q / prior).ln();
        }
    }
    Ok(linear + kl / lambda)
}

/// Hard labels from a plan: row-wise argmax, ties toward the lowest column.
pub fn hard_assign<S: Scalar>(plan: &TransportPlan<S>) -> Vec<usize> {
    plan.plan.rows().into_iter().map(argmax_lowest).collect()
}

/// Both directions of the cross-modality label assignment.
#[derive(Debug, Clone)]
pub struct DualAssignment<S> {
    /// Visible-cluster label per infrared sample (from Q^r).
    pub labels_r_from_v: Vec<usize>,
    /// Infrared-cluster label per visible sample (from Q^v).
    pub labels_v_from_r: Vec<usize>,
    pub plan_r: TransportPlan<S>,
    pub plan_v: TransportPlan<S>,
}

/// Runs the transport assignment independently in both directions:
/// infrared predictions under the visible head, and visible predictions
/// under the infrared head.
pub fn dual_assign<S: Scalar>(
    pred_r_under_v: ArrayView2<S>,
    pred_v_under_r: ArrayView2<S>,
    cfg: &TransportConfig<S>,
) -> Result<DualAssignment<S>> {
    let plan_r = sinkhorn_plan(pred_r_under_v, cfg)?;
    let plan_v = sinkhorn_plan(pred_v_under_r, cfg)?;
    let labels_r_from_v = hard_assign(&plan_r);
    let labels_v_from_r = hard_assign(&plan_v);
    Ok(DualAssignment { labels_r_from_v, labels_v_from_r, plan_r, plan_v })
}
