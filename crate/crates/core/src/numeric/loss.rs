//! Loss functions: softmax, cross-entropy, the entropy-boosting open-set
//! loss, and binary cross-entropy. All probabilities are clamped to
//! [`PROB_FLOOR`] before taking logs so every loss stays finite.

use crate::error::{Error, Result};

/// Floor applied to probabilities inside log-losses.
pub const PROB_FLOOR: f64 = 1e-12;

/// Numerically stable softmax: the max logit is subtracted before
/// exponentiation, so the result is invariant to a constant shift.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// -log p[label], clamped so a zero probability yields a large finite loss.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::LabelOutOfRange {
            label,
            len: probs.len(),
        });
    }
    Ok(-probs[label].max(PROB_FLOOR).ln())
}

/// Entropy-boosting open-set loss: -(1/K) Σ log p_j. Minimized (value ln K)
/// exactly when the distribution is uniform, so driving it down pushes
/// predictions on unknown queries toward uniform.
pub fn eos_loss(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("eos_loss"));
    }
    let k = probs.len() as f64;
    Ok(-probs.iter().map(|&p| p.max(PROB_FLOOR).ln()).sum::<f64>() / k)
}

/// Binary cross-entropy -[t log s + (1-t) log(1-s)] with the score clamped
/// into [PROB_FLOOR, 1 - PROB_FLOOR].
pub fn bce(score: f64, target: f64) -> Result<f64> {
    if target != 0.0 && target != 1.0 {
        return Err(Error::InvalidBinaryTarget(target));
    }
    let s = score.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    Ok(-(target * s.ln() + (1.0 - target) * (1.0 - s).ln()))
}
