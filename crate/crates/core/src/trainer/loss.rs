use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cross_entropy, BoostedForwardState, ExitSpec};

/// Per-exit cross-entropy losses of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Batch mean of `L_n` for each exit.
    pub per_exit_loss: Vec<f64>,
    /// `Σ_n w_n · per_exit_loss[n]`.
    pub total: f64,
    /// `[sample][exit]` unweighted losses.
    pub per_sample_losses: Vec<Vec<f64>>,
}

/// Cross-entropy of every exit's ensemble logits, weighted by `w_n`.
///
/// The ensemble logits already carry the temperature and, during training,
/// the stop-gradient; this function only evaluates values.
pub fn joint_loss(state: &BoostedForwardState, labels: &[usize], exit_specs: &[ExitSpec]) -> Result<LossBreakdown> {
    let n_exits = state.num_exits();
    if exit_specs.len() != n_exits {
        return Err(Error::shape(format!("{n_exits} exit specs"), exit_specs.len()));
    }
    if labels.len() != state.batch_size {
        return Err(Error::shape(format!("{} labels", state.batch_size), labels.len()));
    }
    let per_sample_losses = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            (0..n_exits)
                .map(|n| {
                    let logits = &state.ensemble_logits[n][i];
                    if y >= logits.len() {
                        Err(Error::OutOfRange {
                            what: "label",
                            detail: format!("{y} not in 0..{}", logits.len()),
                        })
                    } else {
                        Ok(cross_entropy(logits, y))
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = labels.len().max(1) as f64;
    let per_exit_loss: Vec<f64> = (0..n_exits)
        .map(|n| per_sample_losses.iter().map(|row| row[n]).sum::<f64>() / batch)
        .collect();
    let total = weighted_total(&per_exit_loss, exit_specs);
    Ok(LossBreakdown {
        per_exit_loss,
        total,
        per_sample_losses,
    })
}

pub(crate) fn weighted_total(per_exit: &[f64], specs: &[ExitSpec]) -> f64 {
    per_exit.iter().zip(specs).map(|(l, s)| s.loss_weight * l).sum()
}
