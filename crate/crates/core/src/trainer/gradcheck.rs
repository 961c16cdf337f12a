//! Central-difference gradient checks for the boosted training objective.
//!
//! The stop-gradient surrogate is what the analytic pass differentiates:
//! `F_{n-1}` is held at its value for the unperturbed parameters. With
//! gradient rescaling the analytic gradient is not the derivative of any
//! single loss, so the oracle for block-`n` backbone parameters becomes
//! `(1/(N-n+1)) Σ_{i>=n} w_i·FD(L_i)`. Head parameters sit below the rescale
//! junction and keep the plain `Σ_i w_i·FD(L_i)` oracle.

use crate::error::{Error, Result};
use crate::model::{BackwardOptions, Gradients, ModelState, ParamRole};
use crate::par;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_key: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub num_parameters: usize,
    pub rescaled_oracle: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central differences of a vector-valued function at `theta`.
///
/// Returns `[parameter][output]`. Evaluations run in parallel, one scratch
/// copy of `theta` per worker.
pub fn central_differences<F>(theta: &[f64], epsilon: f64, f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync + Send,
{
    let rows = par::map_range_init(
        theta.len(),
        || theta.to_vec(),
        |scratch, k| -> Result<Vec<f64>> {
            let v = scratch[k];
            scratch[k] = v + epsilon;
            let plus = f(scratch);
            scratch[k] = v - epsilon;
            let minus = f(scratch);
            scratch[k] = v;
            let (plus, minus) = (plus?, minus?);
            Ok(plus
                .iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * epsilon))
                .collect())
        },
    );
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("finite-difference gradient".into()));
    }
    Ok(rows)
}

fn flat_params(model: &ModelState) -> Vec<f64> {
    model.params().iter().flat_map(|t| t.data.iter().copied()).collect()
}

fn with_flat_params(model: &ModelState, flat: &[f64]) -> ModelState {
    let mut m = model.clone();
    let mut offset = 0;
    for t in m.params_mut() {
        let len = t.data.len();
        t.data.copy_from_slice(&flat[offset..offset + len]);
        offset += len;
    }
    m
}

/// Finite-difference derivative of each unweighted per-exit batch loss with
/// respect to every parameter, `[flat parameter][exit]`, evaluated on the
/// stop-gradient surrogate when the model has stop-gradient enabled.
pub fn numeric_exit_gradients(
    model: &ModelState,
    inputs: &[Vec<f64>],
    labels: &[usize],
    epsilon: f64,
) -> Result<Vec<Vec<f64>>> {
    let cfg = model.config();
    let frozen = if cfg.stop_gradient && !cfg.independent_heads {
        Some(model.forward_all_exits(inputs)?)
    } else {
        None
    };
    central_differences(&flat_params(model), epsilon, |theta| {
        with_flat_params(model, theta).exit_losses(inputs, labels, frozen.as_ref())
    })
}

/// Compares the analytic total-loss gradient to central differences.
pub fn finite_diff_gradient_check(
    model: &ModelState,
    inputs: &[Vec<f64>],
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic = model.backward(inputs, labels, &BackwardOptions::default())?.gradients;
    check_gradients(model, &analytic, inputs, labels, opts)
}

/// Compares supplied gradients against the finite-difference oracle of
/// `model`. Used directly to confirm that a mismatched gradient is caught.
pub fn check_gradients(
    model: &ModelState,
    analytic: &Gradients,
    inputs: &[Vec<f64>],
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let cfg = model.config();
    let n_exits = model.num_exits();
    let rescaled = cfg.gradient_rescaling && n_exits > 1;
    if rescaled && !cfg.stop_gradient && !cfg.independent_heads {
        return Err(Error::Unsupported(
            "rescaled gradients with a trainable previous ensemble have no per-loss oracle".into(),
        ));
    }
    if analytic.tensors.len() != model.params().len() {
        return Err(Error::shape(
            format!("{} gradient tensors", model.params().len()),
            analytic.tensors.len(),
        ));
    }
    let numeric = numeric_exit_gradients(model, inputs, labels, opts.epsilon)?;
    let weights = cfg.loss_weights();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_key: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        num_parameters: model.num_parameters(),
        rescaled_oracle: rescaled,
    };
    let mut flat = 0;
    for (t, grad) in model.params().iter().zip(&analytic.tensors) {
        let scaled_block = rescaled && t.role == ParamRole::Block;
        let first = if scaled_block { t.exit - 1 } else { 0 };
        let scale = if scaled_block {
            1.0 / (n_exits - t.exit + 1) as f64
        } else {
            1.0
        };
        for (i, &a) in grad.iter().enumerate() {
            let per_loss = &numeric[flat + i];
            let num = scale * (first..n_exits).map(|e| weights[e] * per_loss[e]).sum::<f64>();
            let err = relative_error(a, num, opts.abs_floor);
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient of {}", t.key)));
            }
            if err > report.max_rel_error || report.worst_key.is_empty() {
                report.max_rel_error = err;
                report.worst_key = t.key.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = num;
            }
        }
        flat += grad.len();
    }
    Ok(report)
}
