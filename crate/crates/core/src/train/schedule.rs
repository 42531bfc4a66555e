use super::TrainConfig;
use crate::error::{Error, Result};

/// Learning rate for 0-based `epoch`: `lr0` for the first `lr_hold_epochs`,
/// then linear decay reaching 0 at `epochs`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::Config(format!("epoch {epoch} beyond the {}-epoch schedule", cfg.epochs)));
    }
    if epoch < cfg.lr_hold_epochs || cfg.epochs == cfg.lr_hold_epochs {
        return Ok(cfg.lr0);
    }
    Ok(cfg.lr0 * (cfg.epochs - epoch) as f64 / (cfg.epochs - cfg.lr_hold_epochs) as f64)
}
