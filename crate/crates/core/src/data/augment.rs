use serde::{Deserialize, Serialize};

use super::{BandData, BoundingBox, MultiLayerSample, Raster, SegMask};

/// Which mirrored copies to emit next to the original.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub north_south: bool,
    pub east_west: bool,
    pub both: bool,
}

impl AugmentationSpec {
    pub fn all() -> Self {
        Self {
            north_south: true,
            east_west: true,
            both: true,
        }
    }
}

/// North-south flips rows, east-west flips columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mirror {
    NorthSouth,
    EastWest,
    Both,
}

impl Mirror {
    fn flips(self) -> (bool, bool) {
        match self {
            Mirror::NorthSouth => (true, false),
            Mirror::EastWest => (false, true),
            Mirror::Both => (true, true),
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Mirror::NorthSouth => "ns",
            Mirror::EastWest => "ew",
            Mirror::Both => "nsew",
        }
    }

    pub fn apply_raster(self, r: &Raster) -> Raster {
        let (fy, fx) = self.flips();
        Raster {
            height: r.height,
            width: r.width,
            data: mirror_grid(&r.data, r.height, r.width, fy, fx),
        }
    }

    pub fn apply_mask(self, m: &SegMask) -> SegMask {
        let (fy, fx) = self.flips();
        SegMask {
            height: m.height,
            width: m.width,
            labels: mirror_grid(&m.labels, m.height, m.width, fy, fx),
            class_set: m.class_set.clone(),
        }
    }

    pub fn apply_sample(self, s: &MultiLayerSample) -> MultiLayerSample {
        let bands = s
            .bands
            .iter()
            .map(|b| BandData {
                band: b.band.clone(),
                image: self.apply_raster(&b.image),
                boxes: b
                    .boxes
                    .iter()
                    .map(|bx| mirror_box(bx, self, b.image.width, b.image.height))
                    .collect(),
                mask: b.mask.as_ref().map(|m| self.apply_mask(m)),
            })
            .collect();
        MultiLayerSample {
            sample_id: format!("{}_{}", s.sample_id, self.suffix()),
            timestamp: s.timestamp.clone(),
            bands,
        }
    }
}

fn mirror_grid<T: Copy>(data: &[T], h: usize, w: usize, flip_y: bool, flip_x: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..h {
        let sy = if flip_y { h - 1 - y } else { y };
        let row = &data[sy * w..(sy + 1) * w];
        if flip_x {
            out.extend(row.iter().rev());
        } else {
            out.extend_from_slice(row);
        }
    }
    out
}

pub fn mirror_box(b: &BoundingBox, mirror: Mirror, width: usize, height: usize) -> BoundingBox {
    let (fy, fx) = mirror.flips();
    let mut out = *b;
    if fx {
        out.x = width as f32 - b.x - b.w;
    }
    if fy {
        out.y = height as f32 - b.y - b.h;
    }
    out
}

/// Original sample followed by the requested mirrored copies. Every band of
/// the sample receives the same transform.
pub fn augment(sample: &MultiLayerSample, spec: &AugmentationSpec) -> Vec<MultiLayerSample> {
    let mut out = vec![sample.clone()];
    for (on, m) in [
        (spec.north_south, Mirror::NorthSouth),
        (spec.east_west, Mirror::EastWest),
        (spec.both, Mirror::Both),
    ] {
        if on {
            out.push(m.apply_sample(sample));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BandId, Timestamp};
    use proptest::prelude::*;

    fn sample(h: usize, w: usize, seed: u32) -> MultiLayerSample {
        let classes = vec!["bg".to_string(), "fg".to_string()];
        let bands = (0..2)
            .map(|k| {
                let image = Raster::from_fn(h, w, |y, x| {
                    ((y * 31 + x * 17 + k * 7 + seed as usize) % 97) as f32 / 96.0
                });
                let labels = (0..h * w).map(|i| ((i + k) % 3 == 0) as u8).collect();
                BandData {
                    band: BandId::new(format!("b{k}"), k as i64),
                    image,
                    boxes: vec![BoundingBox::new(1.0, 2.0, 3.0, 2.0, 1)],
                    mask: Some(SegMask::new(h, w, labels, classes.clone()).unwrap()),
                }
            })
            .collect();
        MultiLayerSample {
            sample_id: "s".into(),
            timestamp: Timestamp::Tick(0),
            bands,
        }
    }

    #[test]
    fn east_west_box_mirror() {
        let b = BoundingBox::new(2.0, 3.0, 4.0, 5.0, 1);
        let m = mirror_box(&b, Mirror::EastWest, 10, 10);
        assert_eq!((m.x, m.y, m.w, m.h), (4.0, 3.0, 4.0, 5.0));
    }

    #[test]
    fn north_south_twice_is_identity() {
        let s = sample(6, 9, 3);
        let twice = Mirror::NorthSouth.apply_sample(&Mirror::NorthSouth.apply_sample(&s));
        assert_eq!(twice.bands, s.bands);
    }

    #[test]
    fn all_flags_give_four_samples() {
        let s = sample(4, 4, 0);
        let out = augment(&s, &AugmentationSpec::all());
        assert_eq!(out.len(), 4);
        assert_eq!(out[0], s);
        let ids: Vec<_> = out.iter().map(|s| s.sample_id.as_str()).collect();
        assert_eq!(ids, ["s", "s_ns", "s_ew", "s_nsew"]);
    }

    #[test]
    fn mirroring_moves_pixels_and_boxes_together() {
        let mut s = sample(5, 7, 0);
        for b in &mut s.bands {
            b.image = Raster::filled(5, 7, 0.0);
            for y in 2..4 {
                for x in 1..4 {
                    b.image.set(y, x, 1.0);
                }
            }
            b.boxes = vec![BoundingBox::new(1.0, 2.0, 3.0, 2.0, 1)];
        }
        for m in [Mirror::NorthSouth, Mirror::EastWest, Mirror::Both] {
            let out = m.apply_sample(&s);
            for b in &out.bands {
                let bx = b.boxes[0];
                for y in 0..5 {
                    for x in 0..7 {
                        let inside = (x as f32) >= bx.x
                            && (x as f32) < bx.x2()
                            && (y as f32) >= bx.y
                            && (y as f32) < bx.y2();
                        assert_eq!(b.image.get(y, x) == 1.0, inside, "{m:?} at ({y},{x})");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn mirrors_are_involutions(h in 1usize..9, w in 1usize..9, seed in 0u32..50) {
            let s = sample(h, w, seed);
            for m in [Mirror::NorthSouth, Mirror::EastWest, Mirror::Both] {
                let twice = m.apply_sample(&m.apply_sample(&s));
                prop_assert_eq!(&twice.bands, &s.bands);
            }
        }

        #[test]
        fn augmentation_preserves_counts_and_histograms(h in 1usize..9, w in 1usize..9, seed in 0u32..50) {
            let s = sample(h, w, seed);
            for out in augment(&s, &AugmentationSpec::all()) {
                for (a, b) in out.bands.iter().zip(&s.bands) {
                    prop_assert_eq!(a.boxes.len(), b.boxes.len());
                    prop_assert_eq!(
                        a.mask.as_ref().unwrap().histogram(),
                        b.mask.as_ref().unwrap().histogram()
                    );
                }
            }
        }
    }
}
