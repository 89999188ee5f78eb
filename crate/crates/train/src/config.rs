use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub epochs_femur: usize,
    /// Share of the training studies held out for validation.
    pub val_fraction: f64,
    pub val_every: usize,
    /// Share of all studies used for training (validation included).
    pub train_fraction: f64,
    pub seed: u64,
    /// Side of the square grid images are resampled to.
    pub model_side: usize,
    /// Epoch interval of the periodic `last.ckpt`.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 10,
            epochs_pretrain: 1000,
            epochs_finetune: 100,
            epochs_femur: 1000,
            val_fraction: 0.10,
            val_every: 2,
            train_fraction: 0.75,
            seed: 0,
            model_side: 256,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        for (name, v) in [("val_fraction", self.val_fraction), ("train_fraction", self.train_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must be in (0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("epochs_pretrain", self.epochs_pretrain),
            ("epochs_finetune", self.epochs_finetune),
            ("epochs_femur", self.epochs_femur),
            ("val_every", self.val_every),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.model_side < 16 || !self.model_side.is_multiple_of(16) {
            return bad(format!("model_side must be a positive multiple of 16, got {}", self.model_side));
        }
        Ok(())
    }

    /// Epochs after which validation runs.
    pub fn validation_epochs(&self, epochs: usize) -> Vec<usize> {
        (1..=epochs).filter(|e| e % self.val_every == 0).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig { val_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { train_fraction: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs_femur: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { model_side: 100, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn validation_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.validation_epochs(7), vec![2, 4, 6]);
        assert!(cfg.validation_epochs(1).is_empty());
    }
}
