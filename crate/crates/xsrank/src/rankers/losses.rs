//! Value-level entry points for the four training losses.
//!
//! Each builds a two-node tape (leaf + loss record) so the number reported
//! here is exactly what training minimizes. Gradients of the same records
//! are exercised by the finite-difference suites.

use crate::numkernel::{Result, Tape, Tensor};

/// `Σ_{i,j} 1[y_i > y_j] log(1 + exp(s_j - s_i))`, overflow-safe.
/// Ties in `y` contribute no pairs.
pub fn pairwise_logistic_loss(labels: &[f64], scores: &[f64]) -> Result<f64> {
    on_fresh_tape(scores, |tape, s| tape.pairwise_logistic(s, labels))
}

/// `-Σ_i softmax(y)_i log softmax(s)_i`.
pub fn listnet_loss(labels: &[f64], scores: &[f64]) -> Result<f64> {
    on_fresh_tape(scores, |tape, s| tape.listnet(s, labels))
}

/// Negative log Plackett-Luce likelihood of the label-descending
/// permutation; ties in `y` break by item index (rows arrive in asset
/// identifier order upstream).
pub fn listmle_loss(labels: &[f64], scores: &[f64]) -> Result<f64> {
    on_fresh_tape(scores, |tape, s| tape.listmle(s, labels))
}

/// Mean squared error of scores against regression targets.
pub fn mse_loss(targets: &[f64], scores: &[f64]) -> Result<f64> {
    on_fresh_tape(scores, |tape, s| tape.mse(s, targets))
}

fn on_fresh_tape(
    scores: &[f64],
    f: impl FnOnce(&mut Tape, crate::numkernel::TensorId) -> Result<crate::numkernel::TensorId>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::vector(scores.to_vec())?);
    let loss = f(&mut tape, s)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::math::softmax;

    #[test]
    fn pairwise_closed_forms() {
        // no ordered pairs
        assert_eq!(pairwise_logistic_loss(&[2.0, 2.0, 2.0], &[0.5, -1.0, 3.0]).unwrap(), 0.0);
        // single pair at equal scores
        let l = pairwise_logistic_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        // saturated margin stays finite and tiny
        let l = pairwise_logistic_loss(&[1.0, 0.0], &[30.0, -30.0]).unwrap();
        assert!(l <= 1e-12 && l >= 0.0);
        // length mismatch
        assert!(pairwise_logistic_loss(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn listnet_closed_forms() {
        // s = y: loss is the entropy of softmax(y)
        let y = [3.0, 1.0, 0.0, 2.0];
        let p = softmax(&y);
        let entropy: f64 = -p.iter().map(|&pi| pi * pi.ln()).sum::<f64>();
        let l = listnet_loss(&y, &y).unwrap();
        assert!((l - entropy).abs() < 1e-12);

        // constant shift of scores changes nothing
        let s = [0.4, -0.2, 1.0, 0.0];
        let shifted: Vec<f64> = s.iter().map(|v| v + 57.0).collect();
        let a = listnet_loss(&y, &s).unwrap();
        let b = listnet_loss(&y, &shifted).unwrap();
        assert!((a - b).abs() < 1e-10);

        // hand computation: equal scores make every log-term log(1/2)
        let l = listnet_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn listmle_closed_forms() {
        assert_eq!(listmle_loss(&[5.0], &[2.0]).unwrap(), 0.0);
        let l = listmle_loss(&[1.0, 0.0], &[0.7, 0.7]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn listmle_joint_permutation_invariance() {
        let y = [4.0, 1.0, 3.0, 0.0];
        let s = [0.3, -0.5, 0.9, 0.1];
        let base = listmle_loss(&y, &s).unwrap();
        let perm = [2usize, 0, 3, 1];
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let sp: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
        assert!((listmle_loss(&yp, &sp).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse_loss(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 1.0);
        let y = [0.5, -1.5, 2.0];
        let s = [1.0, 0.0, -1.0];
        let base = mse_loss(&y, &s).unwrap();
        let l = mse_loss(&[-1.5, 2.0, 0.5], &[0.0, -1.0, 1.0]).unwrap();
        assert!((l - base).abs() < 1e-15);
    }

    #[test]
    fn ranking_losses_joint_permutation_invariance() {
        let y = [3.0, 0.0, 2.0, 2.0, 1.0];
        let s = [0.1, -0.4, 0.8, 0.2, 0.0];
        let perm = [4usize, 2, 0, 1, 3];
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let sp: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
        let pw = pairwise_logistic_loss(&y, &s).unwrap();
        let ln = listnet_loss(&y, &s).unwrap();
        assert!((pairwise_logistic_loss(&yp, &sp).unwrap() - pw).abs() < 1e-12);
        assert!((listnet_loss(&yp, &sp).unwrap() - ln).abs() < 1e-12);
    }

    #[test]
    fn losses_minimized_by_label_order() {
        let y = [0.0, 1.0, 2.0, 3.0];
        let aligned = [0.0, 1.0, 2.0, 3.0];
        let reversed = [3.0, 2.0, 1.0, 0.0];
        for f in [pairwise_logistic_loss, listmle_loss, listnet_loss] {
            let good = f(&y, &aligned).unwrap();
            let bad = f(&y, &reversed).unwrap();
            assert!(good >= 0.0);
            assert!(good < bad);
        }
    }
}
