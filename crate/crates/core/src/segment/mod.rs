//! Multi-band segmentation: the weighted cross-entropy objective, the
//! multi-branch U-Net and full-frame mask prediction from detections.

mod loss;
mod model;
mod predict;

pub use loss::{
    band_loss_from_logits, segmentation_loss, SegBandTerms, SegBatch, PROB_EPS, SOLAR_CLASS_WEIGHTS,
};
pub use model::{argmax_batch, PatchLabels, SegConfig, SegModel};
pub use predict::{merged_boxes, patch_inputs, patch_labels, predict_masks};
