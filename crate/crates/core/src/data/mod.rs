//! Multi-layer data model.
//!
//! A [`MultiLayerSample`] is one time-matched set of spatially aligned band
//! images. Every band owns its ground truth: detections and (optionally) a
//! pixel-wise mask. Bands are ordered by their position along the third
//! spatial axis ([`BandId::layer_index`]).

mod augment;
mod manifest;
pub(crate) mod resize;
mod split;

pub use augment::{augment, mirror_box, AugmentationSpec, Mirror};
pub use manifest::{
    load_manifest, read_boxes_csv, read_mask_png, read_raster_png, write_boxes_csv,
    write_dataset, write_mask_png, write_raster_png, BandRecord, DatasetManifest, SampleRecord,
    MANIFEST_FILE,
};
pub use resize::{crop_and_resize, crop_box_region, resize_labels_nearest};
pub use split::{split_dataset, SplitFractions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One spectral band, positioned along the layer axis.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BandId {
    pub name: String,
    pub layer_index: i64,
}

impl BandId {
    pub fn new(name: impl Into<String>, layer_index: i64) -> Self {
        Self {
            name: name.into(),
            layer_index,
        }
    }
}

/// Checks band names are unique and layer indices strictly increase.
pub fn validate_band_order(bands: &[BandId]) -> Result<()> {
    for (i, b) in bands.iter().enumerate() {
        if bands[..i].iter().any(|o| o.name == b.name) {
            return Err(Error::Schema(format!("duplicate band name `{}`", b.name)));
        }
        if i > 0 && bands[i - 1].layer_index >= b.layer_index {
            return Err(Error::Schema(format!(
                "layer_index must strictly increase: `{}` ({}) follows `{}` ({})",
                b.name,
                b.layer_index,
                bands[i - 1].name,
                bands[i - 1].layer_index
            )));
        }
    }
    Ok(())
}

/// Axis-aligned box, top-left origin, half-open extents `[x, x+w) x [y, y+h)`.
///
/// Ground-truth boxes carry integer-valued coordinates; predicted boxes may
/// be fractional. `score` is absent for ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub class_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
}

impl BoundingBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32, class_id: u32) -> Self {
        Self {
            x,
            y,
            w,
            h,
            class_id,
            score: None,
        }
    }

    pub fn with_score(mut self, score: f32) -> Self {
        self.score = Some(score);
        self
    }

    pub fn area(&self) -> f32 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn x2(&self) -> f32 {
        self.x + self.w
    }

    pub fn y2(&self) -> f32 {
        self.y + self.h
    }

    pub fn center(&self) -> (f32, f32) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn intersection(&self, other: &BoundingBox) -> f32 {
        let iw = self.x2().min(other.x2()) - self.x.max(other.x);
        let ih = self.y2().min(other.y2()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &BoundingBox) -> f32 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.x2() <= width as f32
            && self.y2() <= height as f32
    }

    /// Clamps to `[0, width] x [0, height]`.
    pub fn clamped(&self, width: usize, height: usize) -> BoundingBox {
        let x1 = self.x.clamp(0.0, width as f32);
        let y1 = self.y.clamp(0.0, height as f32);
        let x2 = self.x2().clamp(0.0, width as f32);
        let y2 = self.y2().clamp(0.0, height as f32);
        BoundingBox {
            x: x1,
            y: y1,
            w: x2 - x1,
            h: y2 - y1,
            ..*self
        }
    }

    pub(crate) fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.is_valid() && self.within(width, height) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                bbox: format!("{:?}", (self.x, self.y, self.w, self.h)),
                width,
                height,
            })
        }
    }
}

/// Single-channel image, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "raster data has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }
}

/// Pixel-wise class map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub class_set: Vec<String>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, class_set: Vec<String>) -> Result<Self> {
        let mask = Self {
            height,
            width,
            labels,
            class_set,
        };
        mask.validate()?;
        Ok(mask)
    }

    pub fn filled(height: usize, width: usize, label: u8, class_set: Vec<String>) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
            class_set,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "mask has {} labels, expected {}x{}",
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        let n = self.class_set.len();
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize >= n) {
            return Err(Error::Schema(format!(
                "mask label {bad} outside class set of size {n}"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_set.len()];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Acquisition time: ISO-8601 string or an integer tick.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Timestamp {
    Tick(i64),
    Instant(String),
}

impl Default for Timestamp {
    fn default() -> Self {
        Timestamp::Tick(0)
    }
}

/// Image and ground truth of one band within a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BandData {
    pub band: BandId,
    pub image: Raster,
    pub boxes: Vec<BoundingBox>,
    pub mask: Option<SegMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLayerSample {
    pub sample_id: String,
    pub timestamp: Timestamp,
    /// Ordered by `layer_index`.
    pub bands: Vec<BandData>,
}

impl MultiLayerSample {
    pub fn height(&self) -> usize {
        self.bands.first().map_or(0, |b| b.image.height)
    }

    pub fn width(&self) -> usize {
        self.bands.first().map_or(0, |b| b.image.width)
    }

    pub fn band_ids(&self) -> Vec<BandId> {
        self.bands.iter().map(|b| b.band.clone()).collect()
    }

    pub fn band_names(&self) -> Vec<&str> {
        self.bands.iter().map(|b| b.band.name.as_str()).collect()
    }

    pub fn band(&self, name: &str) -> Option<&BandData> {
        self.bands.iter().find(|b| b.band.name == name)
    }

    /// Checks that all bands share the raster size, boxes lie inside the
    /// frame, and masks match the frame.
    pub fn validate(&self) -> Result<()> {
        validate_band_order(&self.band_ids())?;
        let (h, w) = (self.height(), self.width());
        for b in &self.bands {
            if b.image.height != h || b.image.width != w {
                return Err(Error::BandMismatch {
                    sample_id: self.sample_id.clone(),
                    band: b.band.name.clone(),
                    problem: format!(
                        "has size {}x{}, expected {}x{}",
                        b.image.height, b.image.width, h, w
                    ),
                });
            }
            for bx in &b.boxes {
                bx.check_within(w, h).map_err(|_| Error::BandMismatch {
                    sample_id: self.sample_id.clone(),
                    band: b.band.name.clone(),
                    problem: format!("has box {:?} outside the {w}x{h} frame", bx),
                })?;
            }
            if let Some(m) = &b.mask {
                if m.height != h || m.width != w {
                    return Err(Error::BandMismatch {
                        sample_id: self.sample_id.clone(),
                        band: b.band.name.clone(),
                        problem: format!("has mask {}x{}, expected {h}x{w}", m.height, m.width),
                    });
                }
                m.validate()?;
            }
        }
        Ok(())
    }
}
