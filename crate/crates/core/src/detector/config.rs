use serde::{Deserialize, Serialize};

use crate::dataset::AugmentParams;
use crate::error::{Error, Result};
use crate::mstf::MstfConfig;

/// Strides of the three head levels.
pub const STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Side of the square input; a multiple of 32.
    pub input_size: usize,
    pub in_channels: usize,
    /// Widths of the two stride-2 stem convolutions.
    pub stem_widths: [usize; 2],
    /// Pyramid widths at strides 8, 16 and 32.
    pub widths: [usize; 3],
    pub head_width: usize,
    pub num_classes: usize,
    pub mstf: MstfConfig,
    /// Epochs trained with the fusion neck bypassed.
    pub fusion_start_epoch: usize,
    pub augmentation: AugmentParams,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            in_channels: 1,
            stem_widths: [16, 32],
            widths: [48, 64, 96],
            head_width: 48,
            num_classes: 4,
            mstf: MstfConfig::default(),
            fusion_start_epoch: 4,
            augmentation: AugmentParams::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        let widths = self.stem_widths.iter().chain(&self.widths);
        if self.in_channels == 0 || self.head_width == 0 || widths.clone().any(|&w| w == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.mstf.base_stride != STRIDES[0] {
            return Err(Error::Config(format!(
                "mstf.base_stride is {}; the detector pyramid starts at stride {}",
                self.mstf.base_stride, STRIDES[0]
            )));
        }
        self.mstf.validate(STRIDES.len())?;
        for &c in &self.widths {
            self.mstf.lookup.split_ratio.motion_channels(c)?;
        }
        self.augmentation.validate()
    }

    /// Head grid extents per level.
    pub fn grid_sizes(&self) -> [usize; 3] {
        STRIDES.map(|s| self.input_size / s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Heavy-ball momentum SGD with L2 weight decay.
    #[default]
    Sgd,
    /// Adam with decoupled weight decay; `momentum` is its first-moment rate.
    Adam,
}

/// Optimiser and schedule for [`train`](super::train).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: Optimizer,
    /// Consecutive frames per clip; gradients stop at clip boundaries.
    pub clip_len: usize,
    /// Clips per optimiser step.
    pub batch_clips: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` at the end of the cosine.
    pub min_lr_fraction: f64,
    pub warmup_steps: usize,
    pub momentum: f64,
    /// Adam second-moment rate.
    pub adam_beta2: f64,
    /// L2 penalty on convolution kernels (not biases).
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            optimizer: Optimizer::Sgd,
            clip_len: 4,
            batch_clips: 4,
            lr: 0.02,
            min_lr_fraction: 0.05,
            warmup_steps: 20,
            momentum: 0.9,
            adam_beta2: 0.999,
            weight_decay: 5e-4,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &DetectorConfig) -> Result<()> {
        if self.epochs == 0 || self.clip_len == 0 || self.batch_clips == 0 {
            return Err(Error::Config("epochs, clip_len and batch_clips must be positive".into()));
        }
        if model.fusion_start_epoch > self.epochs {
            return Err(Error::Config(format!(
                "fusion_start_epoch {} exceeds the {} training epochs",
                model.fusion_start_epoch, self.epochs
            )));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !finite_nonneg(self.weight_decay)
            || !finite_nonneg(self.grad_clip)
            || !(0.0..=1.0).contains(&self.min_lr_fraction)
        {
            return Err(Error::Config(
                "momentum and adam_beta2 must lie in [0, 1), min_lr_fraction in [0, 1]; weight_decay and grad_clip must be non-negative"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Post-processing thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.01,
            iou_threshold: 0.5,
            max_detections: 100,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config("score and IoU thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = DetectorConfig::default();
        c.validate().unwrap();
        TrainConfig::default().validate(&c).unwrap();
        assert_eq!(c.grid_sizes(), [32, 16, 8]);
    }

    #[test]
    fn rejects_bad_sizes_and_schedules() {
        let c = DetectorConfig {
            input_size: 100,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = DetectorConfig {
            fusion_start_epoch: 20,
            ..Default::default()
        };
        assert!(TrainConfig::default().validate(&c).is_err());
        let c = DetectorConfig {
            augmentation: AugmentParams([90.0, 0.2, 0.0]),
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<DetectorConfig>(r#"{"input_sise": 64}"#).is_err());
        let c: DetectorConfig = serde_json::from_str(r#"{"input_size": 64}"#).unwrap();
        assert_eq!(c.input_size, 64);
    }
}
