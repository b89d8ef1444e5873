//! SGD with momentum and a cosine-annealed learning rate.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.045,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    /// One velocity buffer per store entry (`None` for buffers or params
    /// that never received a gradient).
    pub velocity: Vec<Option<Tensor>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub step: usize,
    pub total_steps: usize,
}

impl OptimState {
    pub fn new(store: &ParamStore, cfg: &OptimConfig, total_steps: usize) -> Self {
        OptimState {
            velocity: vec![None; store.len()],
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            base_lr: cfg.lr,
            step: 0,
            total_steps,
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.base_lr)
    }
}

/// `base_lr · ½ · (1 + cos(π·step/total))`, clamped to the schedule ends.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    (base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0)
}

/// `v ← μ·v + g (+ wd·p)`, `p ← p − lr·v` for every parameter with a
/// gradient, at the current scheduled rate; then advance the step.
pub fn sgd_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut OptimState) -> Result<()> {
    if grads.len() != store.len() || state.velocity.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} velocities for {} parameters",
            grads.len(),
            state.velocity.len(),
            store.len()
        )));
    }
    let lr = state.current_lr();
    for id in store.ids().collect::<Vec<_>>() {
        let Some(g) = &grads[id.index()] else { continue };
        if !store.entry(id).trainable {
            continue;
        }
        let p = store.get_mut(id);
        if g.shape() != p.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        let v = state.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
        for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data()) {
            *vi = state.momentum * *vi + gi + state.weight_decay * pi;
        }
        for (pi, vi) in p.data_mut().iter_mut().zip(v.data()) {
            *pi -= lr * vi;
        }
    }
    state.step += 1;
    Ok(())
}
