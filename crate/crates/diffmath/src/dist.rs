//! Distribution utilities over plain slices.
//!
//! These are the value-level counterparts of the tape operations and are
//! used for diagnostics, evaluation and as oracles in tests.

use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tape::softmax_row;
use crate::LOG_EPS;

const SUM_TOL: f64 = 1e-4;

fn check_distribution<T: Scalar>(p: &[T]) -> Result<()> {
    let s: f64 = p.iter().map(|x| x.as_f64()).sum();
    if (s - 1.0).abs() > SUM_TOL || p.iter().any(|x| *x < T::zero()) {
        return Err(DiffError::NotADistribution(s));
    }
    Ok(())
}

/// Stabilized tempered softmax `p_i = exp(l_i/T) / Σ_j exp(l_j/T)`.
pub fn softmax_t<T: Scalar>(logits: &[T], temperature: T) -> Result<Vec<T>> {
    if !(temperature > T::zero()) || !temperature.is_finite() {
        return Err(DiffError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(DiffError::NonFinite("softmax logits"));
    }
    let mut out = logits.to_vec();
    softmax_row(&mut out, temperature);
    Ok(out)
}

/// `KL(p ‖ q) = Σ_i p_i ln(p_i / q_i)` in nats, with `0 · ln(0/q) = 0` and
/// `q` floored at [`LOG_EPS`].
pub fn kl_div<T: Scalar>(p: &[T], q: &[T]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(DiffError::LengthMismatch(p.len(), q.len()));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > T::zero())
        .map(|(pi, qi)| {
            let (pi, qi) = (pi.as_f64(), qi.as_f64());
            pi * (pi.ln() - qi.max(LOG_EPS).ln())
        })
        .sum())
}

/// Shannon entropy `-Σ p_i ln p_i` in nats.
pub fn entropy<T: Scalar>(p: &[T]) -> Result<f64> {
    check_distribution(p)?;
    Ok(-p
        .iter()
        .map(|x| x.as_f64())
        .filter(|&x| x > 0.0)
        .map(|x| x * x.ln())
        .sum::<f64>())
}

/// `E_q[ln p] = Σ_i q_i ln(max(p_i, eps))`.
pub fn expected_log<T: Scalar>(q: &[T], p: &[T]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(DiffError::LengthMismatch(q.len(), p.len()));
    }
    Ok(q.iter()
        .zip(p)
        .filter(|(qi, _)| **qi > T::zero())
        .map(|(qi, pi)| qi.as_f64() * pi.as_f64().max(LOG_EPS).ln())
        .sum())
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_t(&[0.0f64, 0.0], 3.0).unwrap(), vec![0.5, 0.5]);
        let p = softmax_t(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-12);
        // uniform limit: |p_i - 1/2| = tanh(10 / 2T) / 2
        let p = softmax_t(&[10.0f64, 0.0], 1000.0).unwrap();
        assert_abs_diff_eq!(p[0] - 0.5, (0.005f64).tanh() / 2.0, epsilon = 1e-12);
        assert!(p.iter().all(|x| (x - 0.5).abs() < 2.6e-3));
        let p = softmax_t(&[10.0f64, 0.0], 10_000.0).unwrap();
        assert!(p.iter().all(|x| (x - 0.5).abs() < 1e-3));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax_t(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(softmax_t(&[1.0f64, 0.0], 0.0).is_err());
        assert!(softmax_t(&[1.0f64, 0.0], -1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = [0.5f64, 0.5];
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
        // 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75)
        let direct = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let kl = kl_div(&p, &[0.25, 0.75]).unwrap();
        assert_abs_diff_eq!(kl, direct, epsilon = 1e-12);
        assert_abs_diff_eq!(kl, 0.14384, epsilon = 1e-4);
        assert!(kl_div(&p, &[1.0]).is_err());
    }

    #[test]
    fn kl_handles_zero_support() {
        // p has zero mass where q is zero: contributes nothing
        let kl = kl_div(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(kl, 0.0);
        // q zero where p has mass: bounded by the floor
        let kl = kl_div(&[0.0f64, 1.0], &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(kl, -LOG_EPS.ln(), epsilon = 1e-9);
    }

    #[test]
    fn entropy_examples() {
        assert_abs_diff_eq!(entropy(&[0.25f64; 4]).unwrap(), 4f64.ln(), epsilon = 1e-12);
        assert_eq!(entropy(&[0.0f64, 1.0, 0.0]).unwrap(), 0.0);
        let direct = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        let h = entropy(&[0.25f64, 0.75]).unwrap();
        assert_abs_diff_eq!(h, direct, epsilon = 1e-12);
        assert_abs_diff_eq!(h, 0.56234, epsilon = 1e-4);
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_map(|v| {
            let v: Vec<f64> = v.into_iter().map(|x| x + 1e-3).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn kl_is_nonnegative((p, q) in (2usize..12).prop_flat_map(|n| (dist(n), dist(n)))) {
            prop_assert!(kl_div(&p, &q).unwrap() >= -1e-10);
            prop_assert!(kl_div(&p, &p).unwrap().abs() < 1e-10);
        }

        #[test]
        fn entropy_bounded_by_log_support(p in (1usize..20).prop_flat_map(dist)) {
            prop_assert!(entropy(&p).unwrap() <= (p.len() as f64).ln() + 1e-10);
        }

        #[test]
        fn softmax_normalized_and_order_preserving(
            logits in prop::collection::vec(-30.0f64..30.0, 1..16),
            t in 0.05f64..50.0,
        ) {
            let p = softmax_t(&logits, t).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let argmax = |v: &[f64]| v.iter().enumerate()
                .fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
            prop_assert_eq!(argmax(&p), argmax(&logits));
        }

        #[test]
        fn kl_entropy_expectation_identity((q, p) in (2usize..10).prop_flat_map(|n| (dist(n), dist(n)))) {
            let lhs = kl_div(&q, &p).unwrap() + entropy(&q).unwrap() + expected_log(&q, &p).unwrap();
            prop_assert!(lhs.abs() < 1e-10);
        }
    }
}
