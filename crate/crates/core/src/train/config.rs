use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::DuplicatePolicy;
use crate::model::ModelConfig;

/// Validation metric used to keep the best checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Single-music grounding mIoU.
    #[default]
    SmgMiou,
    /// Music-set R@1.
    R1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_proportion: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    pub duplicate_policy: DuplicatePolicy,
    pub selection: Selection,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
    /// Tracks localised per query during music-set validation.
    pub detect_top: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            warmup_proportion: 0.02,
            epochs: 40,
            batch_size: 32,
            seed: 0,
            clip_grad_norm: Some(1.0),
            duplicate_policy: DuplicatePolicy::MaskSameTrack,
            selection: Selection::SmgMiou,
            eval_every: 1,
            detect_top: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if !(self.warmup_proportion > 0.0 && self.warmup_proportion < 1.0) {
            return fail(format!("warmup_proportion {} outside (0, 1)", self.warmup_proportion));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return fail("clip_grad_norm must be positive".into());
        }
        if self.eval_every == 0 || self.detect_top == 0 {
            return fail("eval_every and detect_top must be >= 1".into());
        }
        self.model.validate()
    }
}
