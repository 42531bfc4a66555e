//! Conditional GAN training: losses, Adam, the learning-rate schedule, slice
//! extraction and augmentation, cross-validation folds and the training loop.

mod adam;
mod data;
mod loss;
mod schedule;
mod study;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DiscriminatorArch, GeneratorArch};

pub use adam::{adam_step, adam_update, OptimizerState};
pub use data::{
    augment_shift, ct_from_unit, ct_to_unit, extract_sagittal_slices, make_folds, shift_plane, Fold, FoldPlan,
    MrNormalizer, SlicePair, CT_FILL, MR_FILL, TISSUE_UNIT,
};
pub use loss::{adversarial_loss, gan_losses, l1_loss, GanLosses};
pub use schedule::lr_schedule;
pub use study::{run_study, FoldSummary, StudyResult};
pub use trainer::{
    generator_gradients, synthesize_slice, synthesize_volume, train_fold, EpochLog, TrainOutcome, LOG_HEADER,
};

/// Adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLoss {
    /// Sigmoid cross-entropy on per-pixel logits.
    #[default]
    Bce,
    /// Least squares on the raw logits.
    Lsgan,
}

/// Training hyperparameters. Missing JSON fields take the defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_hold_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_l1: f64,
    /// Largest augmentation shift, voxels.
    pub max_shift: usize,
    pub seed: u64,
    /// Batches per epoch; `None` makes every epoch one pass over the training
    /// slices.
    pub batches_per_epoch: Option<usize>,
    /// Validation slices scored per epoch (evenly spaced); `None` scores all.
    pub val_slices: Option<usize>,
    pub gan_loss: GanLoss,
    pub generator: GeneratorArch,
    pub discriminator: DiscriminatorArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 4,
            lr0: 2e-4,
            lr_hold_epochs: 400,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            lambda_l1: 100.0,
            max_shift: 8,
            seed: 0,
            batches_per_epoch: None,
            val_slices: None,
            gan_loss: GanLoss::Bce,
            generator: GeneratorArch::default(),
            discriminator: DiscriminatorArch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.lr_hold_epochs > self.epochs {
            return bad(format!("lr_hold_epochs {} exceeds epochs {}", self.lr_hold_epochs, self.epochs));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad(format!("Adam betas must lie in [0, 1): {} {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return bad(format!("lambda_l1 must be >= 0, got {}", self.lambda_l1));
        }
        if self.batches_per_epoch == Some(0) || self.val_slices == Some(0) {
            return bad("batches_per_epoch and val_slices must be positive when set".into());
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.discriminator.in_channels != self.generator.in_channels + self.generator.out_channels {
            return bad(format!(
                "discriminator takes {} channels, generator pairs give {}",
                self.discriminator.in_channels,
                self.generator.in_channels + self.generator.out_channels
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_json_overrides() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.lr_hold_epochs, cfg.max_shift), (500, 4, 400, 8));
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 30, "lr_hold_epochs": 20, "seed": 7}"#).unwrap();
        assert_eq!((cfg.epochs, cfg.seed, cfg.batch_size), (30, 7, 4));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn invalid_configs() {
        let hold = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        assert!(matches!(hold.validate(), Err(Error::Config(_))));
        let batch = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(batch.validate().is_err());
        let disc = TrainConfig {
            discriminator: DiscriminatorArch {
                in_channels: 3,
                ..DiscriminatorArch::default()
            },
            ..TrainConfig::default()
        };
        assert!(disc.validate().is_err());
    }
}
