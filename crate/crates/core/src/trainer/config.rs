use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::supports_transforms;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, SiameseConfig};

fn d_lr() -> f64 {
    1e-4
}
fn d_weight_decay() -> f64 {
    0.03
}
fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    100
}
fn d_warmup() -> f64 {
    0.1
}
fn d_clip() -> f64 {
    1.0
}
fn d_rho() -> f64 {
    2.0
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_adam_eps() -> f64 {
    1e-8
}
fn d_true() -> bool {
    true
}
fn d_ground_hw() -> (usize, usize) {
    (32, 64)
}
fn d_aerial_hw() -> (usize, usize) {
    (32, 32)
}
fn d_model() -> ModelConfig {
    ModelConfig::desk(2, 64, 4, &DESK_STEM, d_ground_hw())
}

/// Reduced stem widths for desk-scale runs.
pub const DESK_STEM: [usize; 6] = [16, 32, 32, 64, 64, 128];

/// Learning rate tuned for the desk-scale synthetic runs. The default stays
/// at the value used for full-size data.
pub const DESK_LR: f64 = 3e-3;

/// Everything a run depends on. Stored verbatim in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub loss: LossConfig,
    /// Random quarter turns and mirrors applied consistently to both views.
    #[serde(default = "d_true")]
    pub augment: bool,
    #[serde(default)]
    pub sam_enabled: bool,
    #[serde(default = "d_rho")]
    pub sam_rho: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_model")]
    pub model: ModelConfig,
    /// Dataset manifest; in-memory runs leave it unset.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default = "d_ground_hw")]
    pub ground_hw: (usize, usize),
    #[serde(default = "d_aerial_hw")]
    pub aerial_hw: (usize, usize),
    #[serde(default = "d_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn siamese(&self) -> SiameseConfig {
        SiameseConfig::new(&self.model, self.ground_hw, self.aerial_hw)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract(msg));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if !(self.weight_decay >= 0.0) || !(self.sam_rho >= 0.0) {
            return bad("weight_decay and sam_rho must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.augment && !supports_transforms(self.ground_hw, self.aerial_hw) {
            return bad(format!(
                "augment needs a square aerial tile and a panorama width divisible by 4, got {:?}/{:?}",
                self.ground_hw, self.aerial_hw
            ));
        }
        self.loss.validate()?;
        let s = self.siamese();
        s.ground.validate()?;
        s.aerial.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.batch_size, c.clip_norm, c.sam_rho), (1e-4, 0.03, 32, 1.0, 2.0));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        for f in [
            |c: &mut TrainConfig| c.lr = 0.0,
            |c: &mut TrainConfig| c.clip_norm = -1.0,
            |c: &mut TrainConfig| c.batch_size = 1,
        ] {
            let mut c = TrainConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn json_roundtrip() {
        let c = TrainConfig::default();
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
