use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::forward::{backward, forward, ForwardPass, Gradients};
use super::params::{ChannelMask, ParamStore, TaskHead};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First-order optimizer that never touches entries whose freeze flag is set.
///
/// Moment buffers are keyed by slot; a slot is sized on first use.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    slots: Vec<Moments>,
}


impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self { kind, learning_rate, step: 0, slots: Vec::new() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Starts a new step; bias corrections use the updated counter.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates `params` in place from `grads`, skipping frozen entries bit-exactly.
    pub fn update(&mut self, slot: usize, params: &mut [f64], grads: &[f64], frozen: Option<&[bool]>) {
        debug_assert_eq!(params.len(), grads.len());
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    if frozen.is_some_and(|f| f[i]) {
                        continue;
                    }
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.slots.len() <= slot {
                    self.slots.resize_with(slot + 1, Moments::default);
                }
                let mom = &mut self.slots[slot];
                if mom.m.len() != params.len() {
                    mom.m = vec![0.0; params.len()];
                    mom.v = vec![0.0; params.len()];
                }
                let t = self.step.max(1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    if frozen.is_some_and(|f| f[i]) {
                        continue;
                    }
                    mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
                    mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
                    let mh = mom.m[i] / c1;
                    let vh = mom.v[i] / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }

    /// Applies one full step over the trunk and head.
    /// Slot layout: conv layer l uses slots 2l and 2l+1, the head tensors follow.
    pub fn apply(&mut self, store: &mut ParamStore, head: &mut TaskHead, grads: &Gradients) {
        self.begin_step();
        for (l, layer) in store.layers.iter_mut().enumerate() {
            if layer.weight_frozen.iter().all(|f| *f) && layer.bias_frozen.iter().all(|f| *f) {
                continue;
            }
            self.update(2 * l, &mut layer.weight, &grads.conv_weight[l], Some(&layer.weight_frozen));
            self.update(2 * l + 1, &mut layer.bias, &grads.conv_bias[l], Some(&layer.bias_frozen));
        }
        if head.frozen {
            return;
        }
        let base = 2 * store.layers.len();
        if let (Some(h), Some((dw, db))) = (head.hidden.as_mut(), grads.head_hidden.as_ref()) {
            self.update(base, &mut h.weight, dw, None);
            self.update(base + 1, &mut h.bias, db, None);
        }
        self.update(base + 2, &mut head.out.weight, &grads.head_out.0, None);
        self.update(base + 3, &mut head.out.bias, &grads.head_out.1, None);
    }
}

/// Couples a forward pass with the step that consumes it.
#[derive(Debug, Clone)]
pub struct Trainer {
    optimizer: Optimizer,
    pending: Option<ForwardPass>,
}

impl Trainer {
    pub fn new(optimizer: Optimizer) -> Self {
        Self { optimizer, pending: None }
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    /// Forward pass whose intermediates are kept for the next `backward_and_step`.
    pub fn forward(
        &mut self,
        store: &ParamStore,
        config: &NetworkConfig,
        mask: Option<&ChannelMask>,
        head: &TaskHead,
        batch: &[&[f32]],
    ) -> Result<&ForwardPass, NnError> {
        let pass = forward(store, config, mask, head, batch)?;
        Ok(self.pending.insert(pass))
    }

    /// Backpropagates `loss_gradient` (d loss / d logits per sample) and updates every
    /// unfrozen parameter. Consumes the recorded forward pass.
    pub fn backward_and_step(&mut self, store: &mut ParamStore, head: &mut TaskHead, loss_gradient: &[Vec<f64>]) -> Result<(), NnError> {
        let pass = self
            .pending
            .take()
            .ok_or_else(|| NnError::State("backward_and_step called without a recorded forward pass".into()))?;
        let grads = backward(store, head, &pass, loss_gradient)?;
        self.optimizer.apply(store, head, &grads);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_on_quadratic() {
        // loss w², grad 2w; one step of 0.1 from w=1 gives 0.8.
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let mut w = [1.0];
        let g = [2.0 * w[0]];
        opt.begin_step();
        opt.update(0, &mut w, &g, None);
        assert_eq!(w[0], 0.8);
    }

    #[test]
    fn frozen_entries_untouched_by_adam() {
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1);
        let mut w = [1.0, 1.0];
        for _ in 0..5 {
            opt.begin_step();
            opt.update(0, &mut w, &[1.0, 1.0], Some(&[true, false]));
        }
        assert_eq!(w[0].to_bits(), 1.0f64.to_bits());
        assert!(w[1] < 1.0);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3);
        let mut w = [0.5];
        opt.begin_step();
        opt.update(0, &mut w, &[3.0], None);
        assert!((w[0] - (0.5 - 1e-3)).abs() < 1e-9);
    }
}
