use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::heads::{LossConfig, RegressionTarget, TaskId};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epoch_max: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub max_grad_norm: f64,
    /// Dropout on the `[CLS]` vector before each head.
    pub dropout_rate: f64,
    /// Per-task overrides of `dropout_rate`.
    pub task_dropout: BTreeMap<TaskId, f64>,
    pub seed: u64,
    /// Weight of the hard-label loss when a teacher exists.
    pub alpha: f64,
    pub regression_target: RegressionTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epoch_max: 5,
            batch_size: 32,
            base_lr: 5e-5,
            warmup_frac: 0.1,
            max_grad_norm: 1.0,
            dropout_rate: 0.1,
            task_dropout: BTreeMap::new(),
            seed: 1,
            alpha: 0.5,
            regression_target: RegressionTarget::Teacher,
        }
    }
}

impl TrainConfig {
    /// Settings for the synthetic suite at the default desk-scale width.
    pub fn suite_preset() -> Self {
        Self {
            epoch_max: 20,
            base_lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epoch_max == 0 {
            return fail("epoch_max must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail(format!("learning rate {} must be finite and >= 0", self.base_lr));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return fail(format!("warmup_frac {} must be in (0, 1)", self.warmup_frac));
        }
        if !(self.max_grad_norm > 0.0) {
            return fail(format!("max_grad_norm {} must be positive", self.max_grad_norm));
        }
        for (name, &rate) in std::iter::once(("default", &self.dropout_rate))
            .chain(self.task_dropout.iter().map(|(t, r)| (t.as_str(), r)))
        {
            if !(0.0..1.0).contains(&rate) {
                return fail(format!("dropout rate {rate} for {name} must be in [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} must be in [0, 1]", self.alpha));
        }
        Ok(())
    }

    pub fn head_dropout(&self, task: &TaskId) -> f64 {
        self.task_dropout.get(task).copied().unwrap_or(self.dropout_rate)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            regression: self.regression_target,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.base_lr, c.batch_size, c.warmup_frac, c.max_grad_norm), (5e-5, 32, 0.1, 1.0));
        assert!(c.validate().is_ok());
        assert!(TrainConfig { epoch_max: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        let mut over = c.clone();
        over.task_dropout.insert(TaskId::new("x").unwrap(), 0.3);
        assert_eq!(over.head_dropout(&TaskId::new("x").unwrap()), 0.3);
        assert_eq!(over.head_dropout(&TaskId::new("y").unwrap()), 0.1);
        let p = TrainConfig::suite_preset();
        assert_eq!((p.epoch_max, p.base_lr), (20, 1e-3));
    }
}
