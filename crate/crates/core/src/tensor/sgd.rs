//! Stochastic gradient descent with classical momentum.

use super::Tensor;
use crate::error::{Error, Result};

/// Momentum SGD over a fixed parameter list. `step` applies
/// `v <- momentum * v + grad; p <- p - lr * v` and zeroes the gradients.
pub struct Sgd {
    lr: f32,
    momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(params: &[Tensor], lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::ContractViolation(format!(
                "optimizer built for {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let Some(grad) = p.grad() else {
                continue;
            };
            for (vi, gi) in v.iter_mut().zip(grad.iter()) {
                *vi = self.momentum * *vi + gi;
            }
            let lr = self.lr;
            p.update_data(|data| {
                for (d, vi) in data.iter_mut().zip(v.iter()) {
                    *d -= lr * vi;
                }
            });
            p.zero_grad();
        }
        Ok(())
    }
}

/// Drop any pending gradients, e.g. before an update that must not see
/// gradients accumulated by an unrelated loss.
pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(params: &[Tensor], max_norm: f32) -> f32 {
    let mut total = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            total += g.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>();
        }
    }
    let norm = total.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params {
            if let Some(mut g) = p.grad() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
                p.zero_grad();
                p.accumulate_grad(&g);
            }
        }
    }
    norm
}
