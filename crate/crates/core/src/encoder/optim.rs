use serde::{Deserialize, Serialize};

use super::{Blocks, ModelState};
use crate::error::{Error, Result};

/// Constant learning rate after a linear warmup of `warmup_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
}

impl LrSchedule {
    /// Learning rate at 1-based step `t`: `base * min(1, t / warmup_steps)`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.warmup_steps == 0 || t >= self.warmup_steps {
            self.base
        } else {
            self.base * t as f64 / self.warmup_steps as f64
        }
    }
}

fn check_grads(model: &ModelState, grads: &Blocks) -> Result<()> {
    if grads.layers.len() != model.config.num_layers {
        return Err(Error::Contract(format!(
            "gradient has {} layer blocks, model has {}",
            grads.layers.len(),
            model.config.num_layers
        )));
    }
    for (id, g) in grads.present() {
        if g.len() != model.config.param_count(id) {
            return Err(Error::Shape {
                op: "optimizer step",
                lhs: vec![model.config.param_count(id)],
                rhs: vec![g.len()],
            });
        }
    }
    Ok(())
}

/// `p <- p - lr * g` on every block with a non-empty gradient.
pub fn sgd_step(model: &mut ModelState, grads: &Blocks, lr: f64) -> Result<()> {
    check_grads(model, grads)?;
    for (id, g) in grads.present() {
        for (p, gv) in model.params.get_mut(id).iter_mut().zip(g) {
            *p -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A local optimizer with its moment buffers. Adam keeps first and second
/// moments for every block it has seen a gradient for; SGD keeps nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Blocks,
    second: Blocks,
    steps: usize,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, num_layers: usize) -> Self {
        Self {
            kind,
            first: Blocks::empty(num_layers),
            second: Blocks::empty(num_layers),
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, model: &mut ModelState, grads: &Blocks, lr: f64) -> Result<()> {
        let OptimizerKind::Adam { beta1, beta2, eps } = self.kind else {
            return sgd_step(model, grads, lr);
        };
        check_grads(model, grads)?;
        self.steps += 1;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (id, g) in grads.present() {
            let m = self.first.get_mut(id);
            if m.is_empty() {
                m.resize(g.len(), 0.0);
            }
            let v = self.second.get_mut(id);
            if v.is_empty() {
                v.resize(g.len(), 0.0);
            }
            let params = model.params.get_mut(id).iter_mut().zip(g);
            for ((p, gv), (mi, vi)) in params.zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = beta1 * *mi + (1.0 - beta1) * gv;
                *vi = beta2 * *vi + (1.0 - beta2) * gv * gv;
                *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
