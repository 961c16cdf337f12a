use crate::model::{Gradients, ModelState};

/// Step-decay schedule: `base · factor^k`, `k` = number of milestones `<= epoch`.
pub fn learning_rate_at(base: f64, factor: f64, milestones: &[usize], epoch: usize) -> f64 {
    let k = milestones.iter().filter(|&&m| epoch >= m).count();
    base * factor.powi(k as i32)
}

/// Classical momentum SGD: `buf ← μ·buf + g (+ wd·θ)`, `θ ← θ − λ·buf`.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    momentum: f64,
    weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl MomentumSgd {
    pub fn new(lens: impl IntoIterator<Item = usize>, momentum: f64, weight_decay: f64) -> Self {
        MomentumSgd {
            momentum,
            weight_decay,
            buffers: lens.into_iter().map(|l| vec![0.0; l]).collect(),
        }
    }

    pub fn for_model(model: &ModelState, momentum: f64, weight_decay: f64) -> Self {
        Self::new(model.params().iter().map(|t| t.data.len()), momentum, weight_decay)
    }

    /// Updates flat parameter slices in place.
    pub fn step_slices<'a>(&mut self, params: impl IntoIterator<Item = &'a mut [f64]>, grads: &[Vec<f64>], lr: f64) {
        for ((theta, g), buf) in params.into_iter().zip(grads).zip(&mut self.buffers) {
            for ((p, &gi), b) in theta.iter_mut().zip(g).zip(buf.iter_mut()) {
                let d = if self.weight_decay != 0.0 {
                    gi + self.weight_decay * *p
                } else {
                    gi
                };
                *b = self.momentum * *b + d;
                *p -= lr * *b;
            }
        }
    }

    pub fn step(&mut self, model: &mut ModelState, grads: &Gradients, lr: f64) {
        let slices = model.params_mut().iter_mut().map(|t| t.data.as_mut_slice());
        self.step_slices(slices, &grads.tensors, lr);
    }
}
