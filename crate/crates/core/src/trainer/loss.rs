//! Scalar losses, all evaluated from logits.

/// Binary cross-entropy `-[y ln σ(o) + (1-y) ln(1-σ(o))]` in the form
/// `softplus(o) - y·o`, which never takes the log of zero.
pub fn cross_entropy(logit: f64, label: bool) -> f64 {
    let softplus = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    if label {
        softplus - logit
    } else {
        softplus
    }
}

/// `ce + λ·lb + λ_H·entropy`.
pub fn total_loss(ce_mean: f64, lb: f64, entropy: f64, lambda_lb: f64, lambda_entropy: f64) -> f64 {
    ce_mean + lambda_lb * lb + lambda_entropy * entropy
}

/// Cross-entropy of a softmax over `logits` against class `target`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}
