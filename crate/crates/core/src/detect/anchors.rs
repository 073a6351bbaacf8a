use serde::{Deserialize, Serialize};

use crate::data::BoundingBox;
use crate::error::{Error, Result};

/// Anchor shapes placed at every feature-grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// `(w, h)` ratio pairs, e.g. `(1, 2)` for anchors twice as tall as wide.
    pub aspect_ratios: Vec<(f32, f32)>,
    pub base_widths: Vec<f32>,
    pub feature_stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            aspect_ratios: vec![(1.0, 1.0), (1.0, 2.0), (2.0, 1.0)],
            base_widths: vec![32.0, 64.0, 128.0, 256.0],
            feature_stride: 16,
        }
    }
}

impl AnchorConfig {
    pub fn per_location(&self) -> usize {
        self.aspect_ratios.len() * self.base_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.aspect_ratios.is_empty() || self.base_widths.is_empty() {
            return Err(Error::config("anchors", "ratios and widths must be non-empty"));
        }
        if self.feature_stride == 0 {
            return Err(Error::config("anchors.stride", "must be positive"));
        }
        let bad_ratio = self.aspect_ratios.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0));
        if bad_ratio || self.base_widths.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::config("anchors", "ratios and widths must be positive"));
        }
        Ok(())
    }

    /// Anchor `(w, h)` shapes in generation order (ratio-major). Each shape
    /// keeps the area of a `width x width` square.
    pub fn shapes(&self) -> Vec<(f32, f32)> {
        let mut out = Vec::with_capacity(self.per_location());
        for &(rw, rh) in &self.aspect_ratios {
            let r = (rw / rh).sqrt();
            for &width in &self.base_widths {
                out.push((width * r, width / r));
            }
        }
        out
    }
}

/// Anchors for a `feat_h x feat_w` grid, ordered by row, column, shape.
pub fn generate_anchors(cfg: &AnchorConfig, feat_h: usize, feat_w: usize) -> Vec<BoundingBox> {
    let shapes = cfg.shapes();
    let s = cfg.feature_stride as f32;
    let mut out = Vec::with_capacity(feat_h * feat_w * shapes.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let (cx, cy) = ((x as f32 + 0.5) * s, (y as f32 + 0.5) * s);
            for &(w, h) in &shapes {
                out.push(BoundingBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h, 0));
            }
        }
    }
    out
}

/// Clamp on log-scale deltas so decoded boxes stay finite.
const MAX_LOG_SCALE: f32 = 4.135_166_6; // ln(1000 / 16)

/// Offsets of `gt` relative to `anchor`: centre shift over size and log
/// size ratio.
pub fn encode_box(anchor: &BoundingBox, gt: &BoundingBox) -> [f32; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    [
        (gx - ax) / anchor.w,
        (gy - ay) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

pub fn decode_box(anchor: &BoundingBox, t: [f32; 4]) -> BoundingBox {
    let (ax, ay) = anchor.center();
    let cx = ax + t[0] * anchor.w;
    let cy = ay + t[1] * anchor.h;
    let w = anchor.w * t[2].min(MAX_LOG_SCALE).exp();
    let h = anchor.h * t[3].min(MAX_LOG_SCALE).exp();
    BoundingBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h, anchor.class_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    /// Regression target, set for positives only.
    pub offsets: Option<[f32; 4]>,
    pub matched_gt: Option<usize>,
}

/// Labels anchors against one band's ground truth.
///
/// Positive: IoU >= `pos_iou` with some box, or the best anchor for some
/// box. Negative: best IoU < `neg_iou`. Everything else is ignored.
pub fn assign_rpn_targets(
    anchors: &[BoundingBox],
    gt: &[BoundingBox],
    pos_iou: f32,
    neg_iou: f32,
) -> Vec<AnchorTarget> {
    assert!(0.0 <= neg_iou && neg_iou < pos_iou && pos_iou <= 1.0, "invalid IoU thresholds");
    if gt.is_empty() {
        return vec![
            AnchorTarget {
                label: AnchorLabel::Negative,
                offsets: None,
                matched_gt: None,
            };
            anchors.len()
        ];
    }
    let mut best_for_anchor = vec![(0f32, 0usize); anchors.len()];
    let mut best_for_gt = vec![0f32; gt.len()];
    let ious: Vec<Vec<f32>> = anchors
        .iter()
        .map(|a| gt.iter().map(|g| a.iou(g)).collect())
        .collect();
    for (i, row) in ious.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > best_for_anchor[i].0 {
                best_for_anchor[i] = (v, j);
            }
            best_for_gt[j] = best_for_gt[j].max(v);
        }
    }
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let (best, j) = best_for_anchor[i];
            let forced = ious[i]
                .iter()
                .zip(&best_for_gt)
                .position(|(&v, &b)| b > 0.0 && v == b);
            let matched = if best >= pos_iou {
                Some(j)
            } else {
                forced
            };
            match matched {
                Some(j) => AnchorTarget {
                    label: AnchorLabel::Positive,
                    offsets: Some(encode_box(a, &gt[j])),
                    matched_gt: Some(j),
                },
                None if best < neg_iou => AnchorTarget {
                    label: AnchorLabel::Negative,
                    offsets: None,
                    matched_gt: None,
                },
                None => AnchorTarget {
                    label: AnchorLabel::Ignore,
                    offsets: None,
                    matched_gt: None,
                },
            }
        })
        .collect()
}
