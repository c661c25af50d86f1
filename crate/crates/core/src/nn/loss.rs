//! Softmax and cross-entropy.

use crate::error::{MhdError, Result};
use crate::nn::Matrix;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `log softmax(z)` computed as `z - max - ln Σ exp(z - max)`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - max - lse).collect()
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: &Matrix, temperature: f64) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    let inv_t = 1.0 / temperature;
    for (r, row) in logits.iter_rows().enumerate() {
        let scaled: Vec<f64> = row.iter().map(|&z| z * inv_t).collect();
        out.row_mut(r).copy_from_slice(&softmax(&scaled));
    }
    out
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Largest entry of a probability row (the confidence of a prediction).
pub fn max_prob(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits,
/// `(softmax - onehot) / B`.
pub fn cross_entropy_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(MhdError::Shape(format!("{} labels for {} logit rows", labels.len(), logits.rows())));
    }
    let d = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= d) {
        return Err(MhdError::Input(format!("label {bad} out of range for {d} classes")));
    }
    let b = logits.rows();
    if b == 0 {
        return Ok((0.0, Matrix::zeros(0, d)));
    }
    let inv_b = 1.0 / b as f64;
    let mut grad = Matrix::zeros(b, d);
    let mut loss = 0.0;
    for (r, (row, &y)) in logits.iter_rows().zip(labels).enumerate() {
        let logp = log_softmax(row);
        loss -= logp[y];
        let g = grad.row_mut(r);
        for (k, (gk, lp)) in g.iter_mut().zip(&logp).enumerate() {
            let onehot = if k == y { 1.0 } else { 0.0 };
            *gk = (lp.exp() - onehot) * inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric_and_stable() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] < 1e-300 + 1e-15);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let z = [1.0, 2.0, 3.0];
        let e: Vec<f64> = z.iter().map(|v: &f64| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for (p, ek) in softmax(&z).iter().zip(&e) {
            assert!((p - ek / s).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_logits_give_ln_d() {
        let logits = Matrix::zeros(3, 4);
        let (loss, grad) = cross_entropy_grad(&logits, &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-14);
        for row in grad.iter_rows() {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_loss() {
        let logits = Matrix::from_rows(&[vec![50.0, 0.0, 0.0]]).unwrap();
        let (loss, _) = cross_entropy_grad(&logits, &[0]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let logits = Matrix::zeros(1, 3);
        assert!(matches!(cross_entropy_grad(&logits, &[3]), Err(MhdError::Input(_))));
    }

    #[test]
    fn ce_gradient_matches_central_differences() {
        let logits = Matrix::from_rows(&[vec![0.3, -1.2, 2.0, 0.1], vec![-0.5, 0.7, 0.2, 1.1]]).unwrap();
        let labels = [2, 0];
        let (_, grad) = cross_entropy_grad(&logits, &labels).unwrap();
        let eps = 1e-5;
        for i in 0..logits.as_slice().len() {
            let mut plus = logits.clone();
            plus.as_mut_slice()[i] += eps;
            let mut minus = logits.clone();
            minus.as_mut_slice()[i] -= eps;
            let fd = (cross_entropy_grad(&plus, &labels).unwrap().0 - cross_entropy_grad(&minus, &labels).unwrap().0)
                / (2.0 * eps);
            let a = grad.as_slice()[i];
            assert!((fd - a).abs() / a.abs().max(1e-8) < 1e-6, "{i}: {fd} vs {a}");
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    proptest! {
        #[test]
        fn softmax_is_a_probability_vector(z in prop::collection::vec(-15.0f64..15.0, 2..12)) {
            let p = softmax(&z);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn softmax_is_shift_invariant(
            z in prop::collection::vec(-20.0f64..20.0, 2..10),
            c in -100.0f64..100.0,
        ) {
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
