use crate::data::resize::pixel_region;
use crate::data::{crop_and_resize, resize_labels_nearest, BoundingBox, MultiLayerSample, SegMask};
use crate::error::{Error, Result};
use crate::nn::Tensor;

use super::model::{PatchLabels, SegConfig, SegModel};

/// Same-box patches from every model band: one `[N, 1, P, P]` tensor per
/// band, item `i` cropped at `boxes[i]`.
pub fn patch_inputs(sample: &MultiLayerSample, boxes: &[BoundingBox], cfg: &SegConfig) -> Result<Vec<Tensor>> {
    let p = cfg.patch_size;
    cfg
        .bands
        .iter()
        .map(|b| {
            let band = sample.band(&b.name).ok_or_else(|| Error::BandMismatch {
                sample_id: sample.sample_id.clone(),
                band: b.name.clone(),
                problem: "is required by the model but missing".into(),
            })?;
            let mut data = Vec::with_capacity(boxes.len() * p * p);
            for bx in boxes {
                data.extend(crop_and_resize(&band.image, bx, p)?.data);
            }
            Ok(Tensor::from_vec(&[boxes.len(), 1, p, p], data))
        })
        .collect()
}

/// Label patches matching [`patch_inputs`], taken from each band's mask
/// with nearest-neighbour resampling.
pub fn patch_labels(sample: &MultiLayerSample, boxes: &[BoundingBox], cfg: &SegConfig) -> Result<PatchLabels> {
    let p = cfg.patch_size;
    cfg
        .bands
        .iter()
        .map(|b| {
            let band = sample.band(&b.name).expect("checked by patch_inputs");
            let mask = band.mask.as_ref().ok_or_else(|| Error::BandMismatch {
                sample_id: sample.sample_id.clone(),
                band: b.name.clone(),
                problem: "has no mask".into(),
            })?;
            let mut out = Vec::with_capacity(boxes.len() * p * p);
            for bx in boxes {
                bx.check_within(mask.width, mask.height)?;
                let (x0, y0, w, h) = pixel_region(bx);
                let mut region = Vec::with_capacity(w * h);
                for y in y0..y0 + h {
                    region.extend_from_slice(&mask.labels[y * mask.width + x0..y * mask.width + x0 + w]);
                }
                out.extend(resize_labels_nearest(&region, h, w, p, p));
            }
            Ok(out)
        })
        .collect()
}

/// Boxes of all bands merged for patch extraction: larger boxes first, a
/// box is dropped when it overlaps a kept one with IoU above 0.5.
pub fn merged_boxes(sample: &MultiLayerSample) -> Vec<BoundingBox> {
    let mut all: Vec<BoundingBox> = sample.bands.iter().flat_map(|b| b.boxes.iter().copied()).collect();
    all.sort_by(|a, b| b.area().total_cmp(&a.area()));
    let mut kept: Vec<BoundingBox> = Vec::new();
    for b in all {
        if kept.iter().all(|k| k.iou(&b) <= 0.5) {
            kept.push(b);
        }
    }
    kept
}

/// Full-frame masks, one per model band, from per-band detections.
///
/// Each box is cropped from all bands, segmented, and the band's argmax
/// labels are resampled back into the box. Frames start as background;
/// where boxes of one band overlap, the higher-scoring box wins (equal
/// scores: the earlier box).
pub fn predict_masks(sample: &MultiLayerSample, detections: &[Vec<BoundingBox>], model: &SegModel) -> Result<Vec<SegMask>> {
    let cfg = &model.config;
    if detections.len() != cfg.bands.len() {
        return Err(Error::Shape(format!(
            "expected detections for {} bands, got {}",
            cfg.bands.len(),
            detections.len()
        )));
    }
    let (h, w) = (sample.height(), sample.width());
    let mut unique: Vec<BoundingBox> = Vec::new();
    let mut slot: Vec<Vec<usize>> = Vec::with_capacity(detections.len());
    for dets in detections {
        let mut s = Vec::with_capacity(dets.len());
        for d in dets {
            d.check_within(w, h)?;
            let key = BoundingBox { score: None, class_id: 0, ..*d };
            let i = match unique.iter().position(|u| *u == key) {
                Some(i) => i,
                None => {
                    unique.push(key);
                    unique.len() - 1
                }
            };
            s.push(i);
        }
        slot.push(s);
    }
    let labels = if unique.is_empty() {
        vec![Vec::new(); cfg.bands.len()]
    } else {
        model.predict_labels(&patch_inputs(sample, &unique, cfg)?)?
    };
    let p = cfg.patch_size;
    let mut out = Vec::with_capacity(cfg.bands.len());
    for (bi, dets) in detections.iter().enumerate() {
        let mut mask = SegMask::filled(h, w, cfg.background_class, cfg.class_set.clone());
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            let (sa, sb) = (dets[a].score.unwrap_or(0.0), dets[b].score.unwrap_or(0.0));
            sb.total_cmp(&sa).then(a.cmp(&b))
        });
        for &di in order.iter().rev() {
            let u = slot[bi][di];
            let patch = &labels[bi][u * p * p..(u + 1) * p * p];
            let (x0, y0, bw, bh) = pixel_region(&unique[u]);
            let back = resize_labels_nearest(patch, p, p, bh, bw);
            for y in 0..bh {
                let row = &back[y * bw..(y + 1) * bw];
                mask.labels[(y0 + y) * w + x0..(y0 + y) * w + x0 + bw].copy_from_slice(row);
            }
        }
        out.push(mask);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BandData, BandId, Raster, Timestamp};

    fn sample(h: usize, w: usize) -> MultiLayerSample {
        let bands = (0..2)
            .map(|i| BandData {
                band: BandId::new(format!("b{i}"), i),
                image: Raster::from_fn(h, w, |y, x| ((x * 7 + y * 3 + i as usize) % 11) as f32 / 10.0),
                boxes: Vec::new(),
                mask: None,
            })
            .collect();
        MultiLayerSample {
            sample_id: "s".into(),
            timestamp: Timestamp::Tick(0),
            bands,
        }
    }

    fn model(patch: usize) -> SegModel {
        let mut cfg = SegConfig::desk(
            vec![BandId::new("b0", 0), BandId::new("b1", 1)],
            vec!["bg".into(), "a".into(), "b".into()],
        );
        cfg.patch_size = patch;
        SegModel::new(cfg, 2).unwrap()
    }

    #[test]
    fn no_detections_give_background() {
        let s = sample(16, 16);
        let masks = predict_masks(&s, &[vec![], vec![]], &model(8)).unwrap();
        assert!(masks.iter().all(|m| m.labels.iter().all(|&l| l == 0)));
    }

    #[test]
    fn full_frame_box_pastes_argmax_of_full_frame() {
        let s = sample(16, 16);
        let m = model(16);
        let full = BoundingBox::new(0.0, 0.0, 16.0, 16.0, 1).with_score(0.9);
        let masks = predict_masks(&s, &[vec![full], vec![full]], &m).unwrap();
        let direct = m.predict_labels(&patch_inputs(&s, &[full], &m.config).unwrap()).unwrap();
        assert_eq!(masks[0].labels, direct[0]);
        assert_eq!(masks[1].labels, direct[1]);
    }

    #[test]
    fn higher_score_wins_overlap() {
        let s = sample(16, 16);
        let m = model(8);
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0, 1);
        let b = BoundingBox::new(4.0, 4.0, 12.0, 12.0, 1);
        let solo = |bx: BoundingBox| predict_masks(&s, &[vec![bx.with_score(0.5)], vec![]], &m).unwrap()[0].clone();
        let (ma, mb) = (solo(a), solo(b));
        for (hi, lo, winner) in [(a, b, &ma), (b, a, &mb)] {
            let both = predict_masks(&s, &[vec![lo.with_score(0.6), hi.with_score(0.9)], vec![]], &m).unwrap();
            for y in 4..10 {
                for x in 4..10 {
                    assert_eq!(both[0].get(y, x), winner.get(y, x));
                }
            }
        }
    }
}
