//! Forward pass over all exits and the hand-written backward pass with
//! stop-gradient and gradient-rescaling semantics.

use serde::{Deserialize, Serialize};

use super::combine::{boosted_combine, grad_rescale_factors, softmax};
use super::layers::{avg_pool, avg_pool_backward, conv_backward, conv_forward, dense_backward, dense_forward};
use super::{LayerKind, ModelState};
use crate::error::{Error, Result};
use crate::par;
use crate::trainer::{joint_loss, LossBreakdown};

/// Per-exit logits for a batch, indexed `[exit][sample][class]` (exit 0-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostedForwardState {
    /// Raw head outputs `f_n`.
    pub head_logits: Vec<Vec<Vec<f64>>>,
    /// Ensemble outputs `F_n`.
    pub ensemble_logits: Vec<Vec<Vec<f64>>>,
    pub batch_size: usize,
}

impl BoostedForwardState {
    pub fn num_exits(&self) -> usize {
        self.ensemble_logits.len()
    }
}

/// Gradients aligned one-to-one with [`ModelState::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelState) -> Self {
        Gradients {
            tensors: model.params().iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Gradient for the tensor named `key`.
    pub fn get<'a>(&'a self, model: &ModelState, key: &str) -> Option<&'a [f64]> {
        let idx = model.params().iter().position(|t| t.key == key)?;
        Some(&self.tensors[idx])
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct BackwardOptions {
    /// Which loss terms contribute (all when `None`).
    pub exit_mask: Option<Vec<bool>>,
    /// Record `dL/dh_n` at every block output.
    pub keep_junction_grads: bool,
}

impl BackwardOptions {
    /// Only loss term `exit` (1-based).
    pub fn single_exit(exit: usize, num_exits: usize) -> Self {
        BackwardOptions {
            exit_mask: Some((1..=num_exits).map(|n| n == exit).collect()),
            keep_junction_grads: false,
        }
    }

    pub fn with_junction_grads(mut self) -> Self {
        self.keep_junction_grads = true;
        self
    }
}

pub struct BackwardPass {
    pub gradients: Gradients,
    /// Unmasked loss breakdown of the forward pass.
    pub losses: LossBreakdown,
    pub forward: BoostedForwardState,
    /// `[exit][sample][feature]` gradients at block outputs, if requested.
    pub junction_grads: Option<Vec<Vec<Vec<f64>>>>,
}

struct Trace {
    acts: Vec<Vec<f64>>,
    pooled: Vec<Option<Vec<f64>>>,
    head: Vec<Vec<f64>>,
    ensemble: Vec<Vec<f64>>,
}

impl ModelState {
    fn check_inputs(&self, inputs: &[Vec<f64>]) -> Result<()> {
        let want = self.input_len();
        if let Some(bad) = inputs.iter().find(|x| x.len() != want) {
            return Err(Error::shape(format!("input length {want}"), bad.len()));
        }
        Ok(())
    }

    fn check_labels(&self, inputs: &[Vec<f64>], labels: &[usize]) -> Result<()> {
        if labels.len() != inputs.len() {
            return Err(Error::shape(format!("{} labels", inputs.len()), labels.len()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.num_classes()) {
            return Err(Error::OutOfRange {
                what: "label",
                detail: format!("{y} not in 0..{}", self.num_classes()),
            });
        }
        Ok(())
    }

    /// Forward one sample. `frozen_prev(n)` overrides `F_{n-1}` for exit `n`
    /// (0-based, n >= 1) with externally fixed values.
    fn forward_sample(&self, x: &[f64], frozen_prev: Option<&dyn Fn(usize) -> Vec<f64>>) -> Trace {
        let cfg = self.config();
        let p = self.params();
        let n_exits = self.num_exits();
        let mut t = Trace {
            acts: Vec::with_capacity(n_exits),
            pooled: Vec::with_capacity(n_exits),
            head: Vec::with_capacity(n_exits),
            ensemble: Vec::with_capacity(n_exits),
        };
        for (n, b) in self.blocks.iter().enumerate() {
            let input: &[f64] = if n == 0 { x } else { &t.acts[n - 1] };
            let (w, bias) = (&p[b.layer_w].data, &p[b.layer_b].data);
            let mut h = match &b.layer {
                LayerKind::Dense { .. } => dense_forward(w, bias, input),
                LayerKind::Conv(g) => conv_forward(g, w, bias, input),
            };
            h.iter_mut().for_each(|v| *v = v.tanh());
            let pooled = b.pool.map(|(c, pos)| avg_pool(c, pos, &h));
            let head_in = pooled.as_deref().unwrap_or(&h);
            let f = dense_forward(&p[b.head_w].data, &p[b.head_b].data, head_in);
            let ens = if n == 0 || cfg.independent_heads {
                f.clone()
            } else {
                let temp = cfg.exit_specs[n].temperature;
                let combined = match frozen_prev {
                    Some(prev) => boosted_combine(&prev(n), &f, temp),
                    None => boosted_combine(&t.ensemble[n - 1], &f, temp),
                };
                combined.expect("logit widths agree")
            };
            t.acts.push(h);
            t.pooled.push(pooled);
            t.head.push(f);
            t.ensemble.push(ens);
        }
        t
    }

    /// Runs every block and head on a batch of flat inputs.
    pub fn forward_all_exits(&self, inputs: &[Vec<f64>]) -> Result<BoostedForwardState> {
        self.check_inputs(inputs)?;
        let traces = par::map_slice(inputs, |x| {
            let t = self.forward_sample(x, None);
            (t.head, t.ensemble)
        });
        Ok(collect_state(traces, self.num_exits()))
    }

    /// Per-exit batch-mean cross-entropy. With `frozen`, `F_{n-1}` is read
    /// from it instead of recomputed, which evaluates the stop-gradient
    /// surrogate objective whose plain derivative equals the stop-gradient
    /// gradient at the frozen point.
    pub fn exit_losses(
        &self,
        inputs: &[Vec<f64>],
        labels: &[usize],
        frozen: Option<&BoostedForwardState>,
    ) -> Result<Vec<f64>> {
        self.check_inputs(inputs)?;
        self.check_labels(inputs, labels)?;
        if let Some(f) = frozen {
            if f.batch_size != inputs.len() || f.num_exits() != self.num_exits() {
                return Err(Error::shape("frozen state matching the batch", f.batch_size));
            }
        }
        let traces = par::map_range(inputs.len(), |i| {
            let prev = frozen.map(|s| move |n: usize| s.ensemble_logits[n - 1][i].clone());
            let t = match &prev {
                Some(p) => self.forward_sample(&inputs[i], Some(p)),
                None => self.forward_sample(&inputs[i], None),
            };
            (t.head, t.ensemble)
        });
        let state = collect_state(traces, self.num_exits());
        Ok(joint_loss(&state, labels, &self.config().exit_specs)?.per_exit_loss)
    }

    /// Gradient of `Σ w_n L_n` (batch means) with respect to every parameter.
    pub fn backward(&self, inputs: &[Vec<f64>], labels: &[usize], opts: &BackwardOptions) -> Result<BackwardPass> {
        self.check_inputs(inputs)?;
        self.check_labels(inputs, labels)?;
        let n_exits = self.num_exits();
        let batch = inputs.len();
        if batch == 0 {
            return Err(Error::shape("non-empty batch", 0));
        }
        if let Some(m) = &opts.exit_mask {
            if m.len() != n_exits {
                return Err(Error::shape(format!("{n_exits} mask entries"), m.len()));
            }
        }
        let scales: Vec<f64> = self
            .config()
            .exit_specs
            .iter()
            .enumerate()
            .map(|(n, s)| {
                let on = opts.exit_mask.as_ref().is_none_or(|m| m[n]);
                if on {
                    s.loss_weight / batch as f64
                } else {
                    0.0
                }
            })
            .collect();

        type ChunkOut = (Gradients, Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>, Vec<Vec<Vec<f64>>>);
        let chunks: Vec<ChunkOut> = par::map_chunks(batch, par::CHUNK, |start, end| {
            let mut grads = Gradients::zeros_like(self);
            let mut outs = Vec::with_capacity(end - start);
            let mut junctions = Vec::new();
            for i in start..end {
                let trace = self.forward_sample(&inputs[i], None);
                let j = self.backward_sample(&inputs[i], &trace, labels[i], &scales, &mut grads);
                if opts.keep_junction_grads {
                    junctions.push(j);
                }
                outs.push((trace.head, trace.ensemble));
            }
            (grads, outs, junctions)
        });

        let mut gradients = Gradients::zeros_like(self);
        let mut outs = Vec::with_capacity(batch);
        let mut per_sample_junctions = Vec::new();
        for (g, o, j) in chunks {
            gradients.add_assign(&g);
            outs.extend(o);
            per_sample_junctions.extend(j);
        }
        let forward = collect_state(outs, n_exits);
        let losses = joint_loss(&forward, labels, &self.config().exit_specs)?;
        let junction_grads = opts.keep_junction_grads.then(|| {
            (0..n_exits)
                .map(|n| {
                    per_sample_junctions
                        .iter_mut()
                        .map(|s: &mut Vec<Vec<f64>>| std::mem::take(&mut s[n]))
                        .collect()
                })
                .collect()
        });
        Ok(BackwardPass {
            gradients,
            losses,
            forward,
            junction_grads,
        })
    }

    /// Accumulates one sample's gradient; returns `dL/dh_n` per block.
    fn backward_sample(
        &self,
        x: &[f64],
        t: &Trace,
        label: usize,
        scales: &[f64],
        grads: &mut Gradients,
    ) -> Vec<Vec<f64>> {
        let cfg = self.config();
        let n_exits = self.num_exits();
        let chained = !cfg.stop_gradient && !cfg.independent_heads;

        // dL/dF_n, deepest first so the trainable-prev path can chain back.
        let mut g_ens: Vec<Vec<f64>> = vec![Vec::new(); n_exits];
        for n in (0..n_exits).rev() {
            let mut g = softmax(&t.ensemble[n]);
            g[label] -= 1.0;
            g.iter_mut().for_each(|v| *v *= scales[n]);
            if chained && n + 1 < n_exits {
                let temp = cfg.exit_specs[n + 1].temperature;
                for (gi, &up) in g.iter_mut().zip(&g_ens[n + 1]) {
                    *gi += temp * up;
                }
            }
            g_ens[n] = g;
        }

        let p = self.params();
        let mut junction = vec![Vec::new(); n_exits];
        let mut carry: Option<Vec<f64>> = None;
        for n in (0..n_exits).rev() {
            let b = &self.blocks[n];
            let h = &t.acts[n];
            let head_in = t.pooled[n].as_deref().unwrap_or(h);
            let (gw, gb) = two_mut(&mut grads.tensors, b.head_w, b.head_b);
            let g_head_in =
                dense_backward(&p[b.head_w].data, head_in, &g_ens[n], gw, gb, true).expect("input gradient requested");
            let mut gh = match b.pool {
                Some((c, pos)) => avg_pool_backward(c, pos, &g_head_in),
                None => g_head_in,
            };
            if cfg.gradient_rescaling {
                let (hs, ps) = grad_rescale_factors(n + 1, n_exits).expect("exit in range");
                gh.iter_mut().for_each(|v| *v *= hs);
                if let Some(c) = &carry {
                    for (a, &v) in gh.iter_mut().zip(c) {
                        *a += ps * v;
                    }
                }
            } else if let Some(c) = &carry {
                for (a, &v) in gh.iter_mut().zip(c) {
                    *a += v;
                }
            }
            let gz: Vec<f64> = gh.iter().zip(h).map(|(g, a)| g * (1.0 - a * a)).collect();
            junction[n] = gh;
            let input: &[f64] = if n == 0 { x } else { &t.acts[n - 1] };
            let (gw, gb) = two_mut(&mut grads.tensors, b.layer_w, b.layer_b);
            let w = &p[b.layer_w].data;
            carry = match &b.layer {
                LayerKind::Dense { .. } => dense_backward(w, input, &gz, gw, gb, n > 0),
                LayerKind::Conv(g) => conv_backward(g, w, input, &gz, gw, gb, n > 0),
            };
        }
        junction
    }
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

type SampleOut = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn collect_state(samples: Vec<SampleOut>, n_exits: usize) -> BoostedForwardState {
    let batch = samples.len();
    let mut head_logits = vec![Vec::with_capacity(batch); n_exits];
    let mut ensemble_logits = vec![Vec::with_capacity(batch); n_exits];
    for (head, ens) in samples {
        for (n, (h, e)) in head.into_iter().zip(ens).enumerate() {
            head_logits[n].push(h);
            ensemble_logits[n].push(e);
        }
    }
    BoostedForwardState {
        head_logits,
        ensemble_logits,
        batch_size: batch,
    }
}
