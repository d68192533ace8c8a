//! Classification and distribution-matching losses on raw logits. Each
//! `_grad` function returns (loss, d loss / d logits) so callers feed the
//! gradient straight back into the head that produced the logits.

/// Numerically stable log-softmax (max-subtracted).
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|v| v.exp()).collect()
}

/// Cross-entropy of one sample against an integer label.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    assert!(label < logits.len(), "label {label} out of range for {} logits", logits.len());
    let logp = log_softmax(logits);
    let loss = -logp[label];
    let mut grad: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// KL(target || softmax(logits)) for a fixed target distribution, using the
/// convention 0 * ln 0 = 0. The gradient with respect to the logits is simply
/// softmax(logits) - target.
pub fn kl_target_grad(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), target.len(), "target length mismatch");
    let logp = log_softmax(logits);
    let mut loss = 0.0;
    for (&t, &lp) in target.iter().zip(&logp) {
        if t > 0.0 {
            loss += t * (t.ln() - lp);
        }
    }
    let grad: Vec<f64> = logp.iter().zip(target).map(|(lp, t)| lp.exp() - t).collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one_and_orders_correctly() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }

    #[test]
    fn log_softmax_is_shift_invariant() {
        let a = log_softmax(&[1.0, 2.0, 3.0]);
        let b = log_softmax(&[101.0, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_n() {
        let (loss, _) = cross_entropy_grad(&[0.0; 4], 2);
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let logits = [0.3, -1.2, 0.8, 0.1];
        let (_, grad) = cross_entropy_grad(&logits, 1);
        let eps = 1e-6;
        for i in 0..logits.len() {
            let mut hi = logits;
            hi[i] += eps;
            let mut lo = logits;
            lo[i] -= eps;
            let fd = (cross_entropy_grad(&hi, 1).0 - cross_entropy_grad(&lo, 1).0) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-8, "component {i}: fd {fd} vs grad {}", grad[i]);
        }
    }

    #[test]
    fn kl_is_zero_when_prediction_equals_target() {
        // Logits whose softmax equals the target exactly.
        let target = [0.1, 0.2, 0.3, 0.4];
        let logits: Vec<f64> = target.iter().map(|t: &f64| t.ln()).collect();
        let (loss, grad) = kl_target_grad(&logits, &target);
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn kl_handles_zero_target_mass() {
        let (loss, _) = kl_target_grad(&[0.0, 0.0], &[1.0, 0.0]);
        // target concentrated on bin 0 vs uniform prediction: KL = ln 2
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_grad_matches_finite_differences() {
        let target = [0.2, 0.5, 0.3];
        let logits = [0.4, -0.3, 0.9];
        let (_, grad) = kl_target_grad(&logits, &target);
        let eps = 1e-6;
        for i in 0..3 {
            let mut hi = logits;
            hi[i] += eps;
            let mut lo = logits;
            lo[i] -= eps;
            let fd = (kl_target_grad(&hi, &target).0 - kl_target_grad(&lo, &target).0) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-8);
        }
    }
}
