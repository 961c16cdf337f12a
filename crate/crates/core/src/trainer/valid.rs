use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quantile of exit-1 losses that defines a "valid" (still informative) sample.
pub const VALID_QUANTILE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidSampleStats {
    /// Threshold `v`: the 10th percentile of exit-1 losses in the batch.
    pub reference_threshold: f64,
    /// Fraction of samples whose exit-n loss is strictly above `v`.
    pub per_exit_valid_fraction: Vec<f64>,
}

/// Linear-interpolation quantile (positions `q·(n-1)` on sorted data).
pub fn linear_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::shape("non-empty sample", 0));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Valid-sample statistics for a `[sample][exit]` loss matrix.
pub fn valid_fraction(per_sample_losses: &[Vec<f64>]) -> Result<ValidSampleStats> {
    if per_sample_losses.is_empty() {
        return Err(Error::shape("non-empty batch", 0));
    }
    let n_exits = per_sample_losses[0].len();
    if n_exits == 0 || per_sample_losses.iter().any(|r| r.len() != n_exits) {
        return Err(Error::shape(format!("{n_exits} losses per sample"), "ragged rows"));
    }
    let first: Vec<f64> = per_sample_losses.iter().map(|r| r[0]).collect();
    let v = linear_quantile(&first, VALID_QUANTILE)?;
    let batch = per_sample_losses.len() as f64;
    let per_exit_valid_fraction = (0..n_exits)
        .map(|n| per_sample_losses.iter().filter(|r| r[n] > v).count() as f64 / batch)
        .collect();
    Ok(ValidSampleStats {
        reference_threshold: v,
        per_exit_valid_fraction,
    })
}
