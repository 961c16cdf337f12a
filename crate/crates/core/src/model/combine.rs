//! The boosted combine rule `F_n = t_n * F_{n-1} + f_n` and the per-exit
//! scalar functions built on ensemble logits.

use crate::error::{Error, Result};

/// Combines the previous ensemble logits with head logits: `t * prev + head`.
///
/// For the first exit callers pass `prev = 0`, which yields `head` unchanged.
pub fn boosted_combine(prev: &[f64], head: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if prev.len() != head.len() {
        return Err(Error::shape(prev.len(), head.len()));
    }
    Ok(prev.iter().zip(head).map(|(&p, &h)| temperature * p + h).collect())
}

/// Upstream gradient split between the two combine inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct CombineGrads {
    /// Gradient flowing into `F_{n-1}`; `None` when the previous ensemble is
    /// behind a stop-gradient.
    pub prev: Option<Vec<f64>>,
    pub head: Vec<f64>,
}

/// Backward rule for [`boosted_combine`]. With `stop_gradient` the previous
/// ensemble receives no gradient at all.
pub fn boosted_combine_backward(upstream: &[f64], temperature: f64, stop_gradient: bool) -> CombineGrads {
    CombineGrads {
        prev: (!stop_gradient).then(|| upstream.iter().map(|g| temperature * g).collect()),
        head: upstream.to_vec(),
    }
}

/// Backward-only scales at block `exit`'s output junction, 1-based.
///
/// Returns `(head_scale, passthrough_scale)` = `(1/(N-n+1), (N-n)/(N-n+1))`.
/// Applied together at every junction they make the gradient reaching block
/// `n` the mean of the per-loss gradients of exits `n..=N`.
pub fn grad_rescale_factors(exit: usize, num_exits: usize) -> Result<(f64, f64)> {
    if exit == 0 || exit > num_exits {
        return Err(Error::OutOfRange {
            what: "exit index",
            detail: format!("{exit} not in 1..={num_exits}"),
        });
    }
    let remaining = (num_exits - exit + 1) as f64;
    Ok((1.0 / remaining, (num_exits - exit) as f64 / remaining))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]`, computed via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Maximum softmax probability.
pub fn confidence(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::shape("at least one class", 0));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logits passed to confidence".into()));
    }
    Ok(softmax(logits).into_iter().fold(0.0, f64::max))
}

/// Index of the largest logit; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
