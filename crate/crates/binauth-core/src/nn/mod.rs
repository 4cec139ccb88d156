//! Numeric building blocks: tensors, recurrent cells, softmax cross-entropy
//! and Adam. Everything is f64 and deterministic; gradients are checked
//! against finite differences in the test suite.

mod adam;
mod cell;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use cell::{
    lstm_backward_seq, lstm_forward_seq, lstm_step, rnn_step, Affine, AffineGrads, LstmGrads,
    LstmParams, LstmSeqCache, RnnParams,
};
pub use tensor::{acc_ab, acc_t_ab, axpy, dot, sigmoid, Tensor2};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Softmax + cross-entropy against a single target id.
///
/// Probabilities are computed with max-subtraction so large logits cannot
/// overflow; the loss is `-log p[target]`.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>), NnError> {
    if logits.len() < 2 {
        return Err(NnError::ShapeMismatch {
            context: "softmax_xent logits",
            expected: 2,
            got: logits.len(),
        });
    }
    if target >= logits.len() {
        return Err(NnError::ShapeMismatch {
            context: "softmax_xent target",
            expected: logits.len(),
            got: target,
        });
    }
    let mut probs = logits.to_vec();
    let loss = softmax_xent_row(&mut probs, target);
    Ok((loss, probs))
}

/// In-place softmax over `row`, returning the cross-entropy at `target`.
pub(crate) fn softmax_xent_row(row: &mut [f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    let loss = -(row[target].ln());
    debug_assert!(loss.is_finite(), "non-finite cross-entropy");
    loss
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_loss_is_ln_v() {
        let (loss, probs) = softmax_xent(&[0.0; 8], 3).unwrap();
        assert!((loss - (8.0f64).ln()).abs() < 1e-12);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn huge_target_logit_is_stable() {
        let mut logits = vec![0.0; 16];
        logits[5] = 1000.0;
        let (loss, probs) = softmax_xent(&logits, 5).unwrap();
        assert!(loss.abs() < 1e-9);
        assert!(probs.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn probs_sum_to_one() {
        let logits = [1.5, -2.0, 0.25, 3.0, -0.5];
        let (_, probs) = softmax_xent(&logits, 0).unwrap();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(softmax_xent(&[0.0], 0).is_err());
        assert!(softmax_xent(&[0.0, 1.0], 2).is_err());
    }
}
