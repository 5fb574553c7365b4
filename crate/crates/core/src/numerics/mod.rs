//! Minimal dense linear algebra and differentiation substrate.
//!
//! Everything above this module (encoder heads, retriever, reasoner) is
//! expressed in these primitives. All values are f64, all public operations
//! are pure, and finite inputs yield finite outputs or an error.

mod matrix;
mod optim;

pub use matrix::{dot, l2_norm, Matrix};
pub use optim::{adamw_step, grad_check, AdamState, Gradients};

use crate::error::{Error, Result};

/// Numerically stable softmax (max subtraction). Output entries are
/// positive and sum to 1 within 1e-12.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("softmax of empty vector"));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("non-finite softmax input {bad}")));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    Ok(out)
}

/// Cosine similarity, clamped to [-1, 1] against rounding. Errors on a
/// zero-norm input or mismatched dimensions.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dimension(
            format!("vectors of equal length ({})", u.len()),
            format!("lengths {} and {}", u.len(), v.len()),
        ));
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine similarity of zero-norm vector".into(),
        ));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// L2-normalize in place; a zero vector is left untouched.
pub fn l2_normalize(v: &mut [f64]) {
    let n = l2_norm(v);
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_large_inputs_no_overflow() {
        let p = softmax(&[1000.0, 1000.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_hand_example() {
        // [0, ln 3] -> [1/(1+3), 3/(1+3)]
        let p = softmax(&[0.0, 3.0f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_errors() {
        assert!(matches!(softmax(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn softmax_shift_invariance() {
        let v = [0.3, -1.2, 4.0, 0.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 123.456).collect();
        let a = softmax(&v).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 4 / (sqrt(5) * sqrt(5)) = 0.8
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_errors() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            // sums to 1 within 1e-12 for lengths 1..1024 and entries in [-1e4, 1e4]
            #[test]
            fn softmax_sums_to_one(v in proptest::collection::vec(-1e4f64..1e4, 1..1024)) {
                let p = softmax(&v).unwrap();
                let sum: f64 = p.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12, "sum = {sum}");
                prop_assert!(p.iter().all(|x| *x >= 0.0 && x.is_finite()));
            }

            #[test]
            fn cosine_in_range(
                u in proptest::collection::vec(-100.0f64..100.0, 2..16),
                w in proptest::collection::vec(-100.0f64..100.0, 2..16),
            ) {
                let n = u.len().min(w.len());
                let (u, w) = (&u[..n], &w[..n]);
                if l2_norm(u) > 1e-9 && l2_norm(w) > 1e-9 {
                    let c = cosine_similarity(u, w).unwrap();
                    prop_assert!((-1.0..=1.0).contains(&c));
                }
            }
        }
    }
}
