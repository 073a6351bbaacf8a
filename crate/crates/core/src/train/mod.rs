//! Training loops: detection with per-stage checkpointing, segmentation
//! with best-validation selection, and recursive retraining on the
//! previous round's predictions.

mod detect;
mod recursive;
mod segment;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::AugmentationSpec;
use crate::error::{Error, Result};
use crate::nn::Adam;

pub use detect::{train_detection, DetectEpoch, DetectTrainOutcome};
pub use recursive::{recursive_train, recursive_train_patches, ROUND_TOLERANCE, write_rounds, RecursiveOutcome, RoundReport};
pub use segment::{train_segmentation, train_segmentation_patches, PatchItem, PatchSet, SegEpoch, SegTrainOutcome};

pub const DETECT_LEARNING_RATE: f32 = 2e-5;
pub const SEGMENT_LEARNING_RATE: f32 = 4e-3;
pub const DETECT_EPOCHS: usize = 3000;
pub const SEGMENT_EPOCHS: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detect,
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    /// Defaults per task when unset.
    pub epochs: Option<usize>,
    pub learning_rate: Option<f32>,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    /// Fraction of the training set held out when no validation set is given.
    pub val_fraction: f64,
    pub seed: u64,
    pub max_recursion_rounds: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Mirrors applied to the training samples before training.
    pub augment: AugmentationSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(Task::Detect)
    }
}

impl TrainConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            epochs: None,
            learning_rate: None,
            optimizer: AdamConfig::default(),
            batch_size: 4,
            val_fraction: 0.1,
            seed: 0,
            max_recursion_rounds: 3,
            checkpoint_dir: None,
            augment: AugmentationSpec::default(),
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.task {
            Task::Detect => DETECT_EPOCHS,
            Task::Segment => SEGMENT_EPOCHS,
        })
    }

    pub fn learning_rate(&self) -> f32 {
        self.learning_rate.unwrap_or(match self.task {
            Task::Detect => DETECT_LEARNING_RATE,
            Task::Segment => SEGMENT_LEARNING_RATE,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs() == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if !(self.learning_rate() > 0.0) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("train.val_fraction", "must be in [0, 1)"));
        }
        if self.max_recursion_rounds == 0 {
            return Err(Error::config("train.max_recursion_rounds", "must be >= 1"));
        }
        Ok(())
    }

    fn expect_task(&self, task: Task) -> Result<()> {
        if self.task != task {
            return Err(Error::config("train.task", format!("expected {task:?}, got {:?}", self.task)));
        }
        self.validate()
    }

    fn optimizer(&self) -> Adam {
        let mut a = Adam::new(self.learning_rate());
        a.beta1 = self.optimizer.beta1;
        a.beta2 = self.optimizer.beta2;
        a.eps = self.optimizer.eps;
        a
    }
}

/// Independent seed for a named sub-stream of a run.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_defaults_apply_when_unset() {
        let d = TrainConfig::new(Task::Detect);
        assert_eq!((d.learning_rate(), d.epochs()), (2e-5, 3000));
        let s = TrainConfig::new(Task::Segment);
        assert_eq!((s.learning_rate(), s.epochs()), (4e-3, 250));
        assert_eq!(d.optimizer, AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 });
    }

    #[test]
    fn invalid_values_name_their_key() {
        let mut c = TrainConfig::new(Task::Segment);
        c.epochs = Some(0);
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("train.epochs"), "{e}");
    }
}
