//! Adamax, global-norm gradient clipping and the warmup/linear-decay schedule.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Per-parameter Adamax moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamaxSlot {
    /// First moment.
    pub m: Vec<f64>,
    /// Exponentially weighted infinity norm.
    pub u: Vec<f64>,
    /// Number of updates applied to this parameter.
    pub step: u64,
}

/// Adamax (the infinity-norm variant of Adam).
///
/// Moments are kept per parameter name and a parameter's step count only
/// advances when it receives a gradient, so task heads that sit out a batch
/// keep their bias correction intact.
#[derive(Clone, Debug, PartialEq)]
pub struct Adamax {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: BTreeMap<String, AdamaxSlot>,
}

impl Default for Adamax {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adamax {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            slots: BTreeMap::new(),
        }
    }

    /// Applies one update to every `(name, param, grad)` triple.
    ///
    /// All gradients are checked for finiteness before anything is touched;
    /// a non-finite entry aborts the whole step.
    pub fn step<'a>(
        &mut self,
        updates: impl IntoIterator<Item = (&'a str, &'a mut Tensor, &'a Tensor)>,
        lr: f64,
    ) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(contract(format!("learning rate must be >= 0, got {lr}")));
        }
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, param, grad) in &updates {
            if param.shape() != grad.shape() {
                return Err(Error::Dimension {
                    op: "adamax_step",
                    left: param.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite((*name).to_string()));
            }
        }
        for (name, param, grad) in updates {
            let slot = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| AdamaxSlot {
                    m: vec![0.0; grad.len()],
                    u: vec![0.0; grad.len()],
                    step: 0,
                });
            slot.step += 1;
            let step_size = lr / (1.0 - self.beta1.powi(slot.step as i32));
            for (((p, &g), m), u) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(slot.m.iter_mut())
                .zip(slot.u.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *u = (self.beta2 * *u).max(g.abs());
                *p -= step_size * *m / (*u + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients jointly so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<'a>(grads: impl IntoIterator<Item = &'a mut Tensor>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let mut grads: Vec<&mut Tensor> = grads.into_iter().collect();
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
    norm
}

/// Linear warmup from 0 to `base_lr` over the first `warmup_frac` of
/// training, then linear decay to exactly 0 at `total_steps`.
///
/// The warmup length is rounded to whole steps and is at least one step.
pub fn lr_at(step: usize, total_steps: usize, warmup_frac: f64, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(contract(format!("step {step} beyond total {total_steps}")));
    }
    if !(warmup_frac > 0.0 && warmup_frac < 1.0) {
        return Err(contract(format!("warmup fraction must be in (0, 1), got {warmup_frac}")));
    }
    let warmup = ((warmup_frac * total_steps as f64).round() as usize).max(1);
    if step >= total_steps {
        return Ok(0.0);
    }
    if step < warmup {
        return Ok(base_lr * (step as f64 / warmup as f64));
    }
    Ok(base_lr * ((total_steps - step) as f64 / (total_steps - warmup) as f64))
}
