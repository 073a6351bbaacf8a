//! Multi-band detection: anchors and targets, proposal policy, NMS, the
//! detection objective, per-stage checkpointing and the network itself.

mod anchors;
mod loss;
mod model;
mod moo;
mod nms;
mod proposals;

pub use anchors::{
    assign_rpn_targets, decode_box, encode_box, generate_anchors, AnchorConfig, AnchorLabel, AnchorTarget,
};
pub use loss::{
    band_loss_from_logits, detection_loss, detection_loss_grad, regression_sum, smooth_l1, BandGrad, BandTerms,
    DetectionBatch, DEFAULT_LAMBDA,
};
pub use model::{detect_forward, BandDetections, DetectConfig, DetectLosses, DetectModel};
pub use moo::{moo_update, Stage, StageCheckpointSet, StageLosses, StageRecord};
pub use nms::{nms, nms_indices};
pub use proposals::{combine_proposals, Proposal, ProposalMode};
pub use crate::fusion::{fuse_features, FusionOp, FusionSpec, FusionStage};
