//! SGD with momentum and decoupled-from-masking weight decay, plus the
//! learning-rate schedules used by the training flow.

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

/// Per-epoch learning-rate shape; the base rate is supplied by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up over `warmup_epochs`, then cosine decay to zero at
    /// `total_epochs`.
    Cosine { warmup_epochs: usize },
}

impl LrSchedule {
    pub fn lr_at(&self, base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base_lr,
            LrSchedule::Cosine { warmup_epochs } => {
                if epoch < warmup_epochs {
                    base_lr * (epoch + 1) as f64 / warmup_epochs as f64
                } else {
                    let span = (total_epochs.saturating_sub(warmup_epochs)).max(1) as f64;
                    let progress = (epoch - warmup_epochs) as f64 / span;
                    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

/// Stateful SGD: v ← momentum·v + grad + weight_decay·param;
/// param ← param − lr·v. Velocity slots follow parameter order.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// One update over all parameters. Every parameter must carry a
    /// gradient buffer; grads are consumed (cleared) by the step.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<(), TensorError> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(TensorError::State(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (slot, param) in params.iter_mut().enumerate() {
            let grad = match param.grad() {
                Some(g) => g.to_vec(),
                None => {
                    return Err(TensorError::State(format!(
                        "parameter {slot} has no gradient; run backward first"
                    )))
                }
            };
            let v = &mut self.velocity[slot];
            let data = param.data_mut();
            for i in 0..data.len() {
                v[i] = self.momentum * v[i] + grad[i] + self.weight_decay * data[i];
                data[i] -= lr * v[i];
            }
            param.zero_grad();
        }
        Ok(())
    }
}
