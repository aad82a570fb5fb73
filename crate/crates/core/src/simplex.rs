//! Small helpers for probability vectors: softmax, smoothing, KL divergence,
//! one-hot encoding. Everything downstream (labels, losses, scores) is built
//! on these.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::scalar::Scalar;

/// Floor applied to predicted probabilities before any logarithm, so that
/// −log p stays finite.
pub const PROB_FLOOR: f64 = 1e-30;

/// Floor-then-renormalize smoothing strength applied to both sides of
/// every label/prediction KL divergence.
pub const KL_SMOOTHING_EPS: f64 = 1e-12;

/// Numerically stable softmax of a single logit vector (max-shifted).
pub fn softmax<S: Scalar>(logits: ArrayView1<S>) -> Array1<S> {
    let max = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut out = logits.mapv(|z| (z - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|e| e / sum);
    out
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows<S: Scalar>(logits: ArrayView2<S>) -> Array2<S> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (mut row_out, row_in) in out.axis_iter_mut(Axis(0)).zip(logits.axis_iter(Axis(0))) {
        row_out.assign(&softmax(row_in));
    }
    out
}

/// Floors every entry at `eps` and renormalizes to sum one.
///
/// This is the smoothing applied to both arguments of the KL divergences
/// used for label scoring, so that one-hot vectors and sparse neighbor
/// averages never produce infinite divergences.
pub fn floor_renormalize<S: Scalar>(p: ArrayView1<S>, eps: S) -> Array1<S> {
    let mut out = p.mapv(|v| v.max(eps));
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// KL divergence `Σ p_i ln(p_i / q_i)` over strictly positive inputs.
///
/// Callers are responsible for smoothing; entries with `p_i = 0`
/// contribute zero regardless of `q_i`.
pub fn kl_divergence<S: Scalar>(p: ArrayView1<S>, q: ArrayView1<S>) -> S {
    debug_assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q.iter())
        .map(|(&pi, &qi)| {
            if pi > S::zero() {
                pi * (pi / qi).ln()
            } else {
                S::zero()
            }
        })
        .sum()
}

/// KL divergence after floor-renormalize smoothing of both arguments.
pub fn smoothed_kl<S: Scalar>(p: ArrayView1<S>, q: ArrayView1<S>, eps: S) -> S {
    let ps = floor_renormalize(p, eps);
    let qs = floor_renormalize(q, eps);
    kl_divergence(ps.view(), qs.view())
}

/// One-hot vector of length `dim` with a one at `index`.
pub fn one_hot<S: Scalar>(index: usize, dim: usize) -> Array1<S> {
    let mut out = Array1::zeros(dim);
    out[index] = S::one();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_matches_direct_computation() {
        let p = softmax(array![1.0_f64, 2.0, 3.0].view());
        let z: f64 = 1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp();
        assert!((p[0] - 1.0f64.exp() / z).abs() < 1e-15);
        assert!((p[1] - 2.0f64.exp() / z).abs() < 1e-15);
        assert!((p[2] - 3.0f64.exp() / z).abs() < 1e-15);
        assert!((p.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(array![1000.0_f64, 1001.0, 1002.0].view());
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.sum() - 1.0).abs() < 1e-12);
        // Shift invariance: same as logits 0,1,2.
        let q = softmax(array![0.0_f64, 1.0, 2.0].view());
        for (a, b) in p.iter().zip(q.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_matches_per_row() {
        let logits = array![[0.0_f64, 1.0], [3.0, -1.0]];
        let p = softmax_rows(logits.view());
        for i in 0..2 {
            let row = softmax(logits.row(i));
            for j in 0..2 {
                assert!((p[[i, j]] - row[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn floor_renormalize_sums_to_one_and_respects_floor() {
        let p = array![1.0_f64, 0.0, 0.0];
        let s = floor_renormalize(p.view(), 1e-12);
        assert!((s.sum() - 1.0).abs() < 1e-15);
        assert!(s[1] > 0.0 && s[2] > 0.0);
        assert!(s[0] > 0.999_999);
    }

    #[test]
    fn kl_is_zero_on_identical_distributions() {
        let p = array![0.2_f64, 0.3, 0.5];
        assert!(kl_divergence(p.view(), p.view()).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_hand_value() {
        let p = array![0.5_f64, 0.5];
        let q = array![0.9_f64, 0.1];
        // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_divergence(p.view(), q.view()) - expected).abs() < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mut p = Array1::from_shape_fn(6, |_| rng.gen::<f64>() + 1e-3);
            let mut q = Array1::from_shape_fn(6, |_| rng.gen::<f64>() + 1e-3);
            p /= p.sum();
            q /= q.sum();
            assert!(kl_divergence(p.view(), q.view()) >= -1e-12);
        }
    }

    #[test]
    fn smoothed_kl_handles_one_hot_against_disjoint_one_hot() {
        let p = one_hot::<f64>(0, 3);
        let q = one_hot::<f64>(2, 3);
        let d = smoothed_kl(p.view(), q.view(), 1e-12);
        assert!(d.is_finite());
        assert!(d > 0.0);
    }

    #[test]
    fn one_hot_has_single_unit_entry() {
        let v = one_hot::<f64>(2, 4);
        assert_eq!(v, array![0.0, 0.0, 1.0, 0.0]);
    }
}
