//! Adam / momentum SGD with decoupled weight decay and a warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::quantizers::GAMMA_FLOOR;

use super::model::{Grads, PARAM_DECAY};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear warmup over the first `warmup_frac` of the run, cosine decay to zero afterwards.
pub fn lr_at(base: f64, iteration: usize, total: usize, warmup_frac: f64) -> f64 {
    let warmup = (warmup_frac * total as f64).round() as usize;
    if iteration < warmup {
        return base * (iteration + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((iteration - warmup) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    m: [Vec<f64>; 8],
    v: [Vec<f64>; 8],
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            m: Default::default(),
            v: Default::default(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Slots with an empty gradient are skipped; weight decay applies only to
    /// slots flagged in [`PARAM_DECAY`], never to quantizer scales, and scales are kept
    /// above [`GAMMA_FLOOR`].
    pub fn step(&mut self, params: [&mut Vec<f64>; 8], grads: &Grads, lr: f64, weight_decay: f64) {
        self.t += 1;
        for (slot, (p, g)) in params.into_iter().zip(&grads.slots).enumerate() {
            if g.is_empty() {
                continue;
            }
            debug_assert_eq!(p.len(), g.len());
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            if m.len() != g.len() {
                *m = vec![0.0; g.len()];
                *v = vec![0.0; g.len()];
            }
            if PARAM_DECAY[slot] && weight_decay > 0.0 {
                for w in p.iter_mut() {
                    *w -= lr * weight_decay * *w;
                }
            }
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    for (((w, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    for ((w, &gi), mi) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = momentum * *mi + gi;
                        *w -= lr * *mi;
                    }
                }
            }
            if !PARAM_DECAY[slot] && slot >= 4 {
                for w in p.iter_mut() {
                    *w = w.max(GAMMA_FLOOR);
                }
            }
        }
    }
}
