use crate::data::BoundingBox;

/// Indices kept by greedy NMS, in descending score order. A box is
/// suppressed when its IoU with an already kept box exceeds `iou_threshold`.
/// Equal scores keep input order.
pub fn nms_indices(boxes: &[BoundingBox], scores: &[f32], iou_threshold: f32) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// NMS over scored boxes; boxes without a score count as 0.
pub fn nms(boxes: &[BoundingBox], iou_threshold: f32) -> Vec<BoundingBox> {
    let scores: Vec<f32> = boxes.iter().map(|b| b.score.unwrap_or(0.0)).collect();
    nms_indices(boxes, &scores, iou_threshold)
        .into_iter()
        .map(|i| boxes[i])
        .collect()
}
