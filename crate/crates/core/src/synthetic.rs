//! Multi-layer datasets built from co-registered volumes, weak labels, and
//! a toy sphere-scene generator with exact per-band ground truth.
//!
//! Band `k` of a built sample is slice `z0 + k·g` of modality `k`, so
//! consecutive bands show cuts of the same 3D objects `g` voxels apart.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_dataset, BandData, BandId, BoundingBox, DatasetManifest, MultiLayerSample, Raster,
    SegMask, Timestamp,
};
use crate::error::{Error, Result};
use crate::morph;

/// Class id carried by every object box (detection is single-class).
pub const OBJECT_CLASS: u32 = 1;

/// Scalar volume, `z`-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(depth: usize, height: usize, width: usize) -> Self {
        Self {
            depth,
            height,
            width,
            data: vec![0.0; depth * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn slice(&self, z: usize) -> Raster {
        let n = self.height * self.width;
        Raster {
            height: self.height,
            width: self.width,
            data: self.data[z * n..(z + 1) * n].to_vec(),
        }
    }
}

/// Class-index volume (0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVolume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
    pub class_set: Vec<String>,
}

impl ClassVolume {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.depth, self.height, self.width)
    }

    pub fn slice(&self, z: usize) -> SegMask {
        let n = self.height * self.width;
        SegMask {
            height: self.height,
            width: self.width,
            labels: self.data[z * n..(z + 1) * n].to_vec(),
            class_set: self.class_set.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceGapConfig {
    pub gap: usize,
    pub z0: usize,
    pub band_order: Vec<String>,
}

impl SliceGapConfig {
    pub fn slice_index(&self, band: usize) -> usize {
        self.z0 + band * self.gap
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.gap == 0 {
            return Err(Error::config("gap", "must be >= 1"));
        }
        if self.band_order.is_empty() {
            return Err(Error::config("band_order", "must list at least one modality"));
        }
        let last = self.slice_index(self.band_order.len() - 1);
        if last >= depth {
            return Err(Error::config(
                "gap",
                format!(
                    "z0 + (bands-1)*g = {last} exceeds volume depth {depth} (gap overflow)"
                ),
            ));
        }
        Ok(())
    }
}

/// Tight boxes around each 8-connected non-background component.
pub fn boxes_from_mask(mask: &SegMask, background: u8) -> Vec<BoundingBox> {
    let fg: Vec<bool> = mask.labels.iter().map(|&l| l != background).collect();
    let (_, comps) = morph::label_components(&fg, mask.height, mask.width);
    comps
        .iter()
        .map(|c| {
            BoundingBox::new(
                c.min_x as f32,
                c.min_y as f32,
                (c.max_x - c.min_x + 1) as f32,
                (c.max_y - c.min_y + 1) as f32,
                OBJECT_CLASS,
            )
        })
        .collect()
}

/// Selects slice `z0 + k·g` of modality `k` (in `cfg.band_order`) and the
/// matching ground-truth slice for every band.
pub fn build_multilayer_from_volumes(
    sample_id: &str,
    timestamp: Timestamp,
    volumes: &BTreeMap<String, Volume>,
    gt: &ClassVolume,
    cfg: &SliceGapConfig,
) -> Result<MultiLayerSample> {
    let shape = gt.shape();
    cfg.validate(shape.0)?;
    let mut bands = Vec::with_capacity(cfg.band_order.len());
    for (k, name) in cfg.band_order.iter().enumerate() {
        let vol = volumes
            .get(name)
            .ok_or_else(|| Error::config("band_order", format!("no volume for modality `{name}`")))?;
        if vol.shape() != shape {
            return Err(Error::Shape(format!(
                "modality `{name}` has shape {:?}, ground truth has {:?}",
                vol.shape(),
                shape
            )));
        }
        let z = cfg.slice_index(k);
        let mask = gt.slice(z);
        bands.push(BandData {
            band: BandId::new(name.clone(), z as i64),
            image: vol.slice(z),
            boxes: boxes_from_mask(&mask, 0),
            mask: Some(mask),
        });
    }
    Ok(MultiLayerSample {
        sample_id: sample_id.to_string(),
        timestamp,
        bands,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeakLabelConfig {
    /// Pixels strictly above this intensity percentile seed the foreground.
    pub intensity_percentile: f64,
    pub morph_open_radius: usize,
    pub morph_close_radius: usize,
    pub min_component_area: usize,
    pub class_set: Vec<String>,
    pub foreground_label: u8,
    pub background_label: u8,
}

impl Default for WeakLabelConfig {
    fn default() -> Self {
        Self {
            intensity_percentile: 99.0,
            morph_open_radius: 2,
            morph_close_radius: 2,
            min_component_area: 25,
            class_set: vec!["background".into(), "foreground".into()],
            foreground_label: 1,
            background_label: 0,
        }
    }
}

impl WeakLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity_percentile > 0.0 && self.intensity_percentile < 100.0) {
            return Err(Error::config("intensity_percentile", "must lie in (0, 100)"));
        }
        let n = self.class_set.len();
        if self.foreground_label as usize >= n || self.background_label as usize >= n {
            return Err(Error::config("class_set", "labels must index the class set"));
        }
        Ok(())
    }
}

/// Linear-interpolated percentile (`p` in `[0, 100]`).
pub fn percentile(values: &[f32], p: f64) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    let pos = p.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let f = (pos - lo as f64) as f32;
    v[lo] + (v[hi] - v[lo]) * f
}

/// Conservative foreground: threshold at the percentile, open, close, keep
/// only pixels that passed the threshold, drop small components.
///
/// The result is always a subset of the raw threshold foreground, so the
/// labels trade recall for precision.
pub fn make_weak_seg_labels(image: &Raster, cfg: &WeakLabelConfig) -> Result<SegMask> {
    cfg.validate()?;
    let (h, w) = (image.height, image.width);
    let t = percentile(&image.data, cfg.intensity_percentile);
    let thresh: Vec<bool> = image.data.iter().map(|&v| v > t).collect();
    let opened = morph::open(&thresh, h, w, cfg.morph_open_radius);
    let closed = morph::close(&opened, h, w, cfg.morph_close_radius);
    let kept: Vec<bool> = closed.iter().zip(&thresh).map(|(&c, &t)| c && t).collect();
    let fg = morph::remove_small_components(&kept, h, w, cfg.min_component_area);
    let labels = fg
        .iter()
        .map(|&f| if f { cfg.foreground_label } else { cfg.background_label })
        .collect();
    SegMask::new(h, w, labels, cfg.class_set.clone())
}

/// Erodes every non-background class region by `erosion_radius`; eroded
/// pixels become `background`. The output is a subset of the input
/// foreground with labels preserved.
pub fn weaken_gt_masks(gt: &SegMask, erosion_radius: usize, background: u8) -> SegMask {
    let (h, w) = (gt.height, gt.width);
    let mut out = gt.clone();
    if erosion_radius == 0 {
        return out;
    }
    let classes: std::collections::BTreeSet<u8> =
        gt.labels.iter().copied().filter(|&l| l != background).collect();
    for c in classes {
        let region: Vec<bool> = gt.labels.iter().map(|&l| l == c).collect();
        let core = morph::erode(&region, h, w, erosion_radius);
        for (i, (&r, &k)) in region.iter().zip(&core).enumerate() {
            if r && !k {
                out.labels[i] = background;
            }
        }
    }
    out
}

/// A sphere in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f32,
    pub cy: f32,
    pub cz: f32,
    pub radius: f32,
    pub brightness: f32,
    /// Brighter inner sphere labelled with its own class.
    #[serde(default)]
    pub core: Option<Core>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Core {
    pub cx: f32,
    pub cy: f32,
    pub cz: f32,
    pub radius: f32,
    /// Added to the blob brightness inside the core.
    pub boost: f32,
}

#[inline]
fn in_sphere(c: (f32, f32, f32), r: f32, z: f32, y: f32, x: f32) -> bool {
    let (dx, dy, dz) = (x - c.0, y - c.1, z - c.2);
    dx * dx + dy * dy + dz * dz <= r * r
}

impl Blob {
    #[inline]
    pub fn contains(&self, z: f32, y: f32, x: f32) -> bool {
        in_sphere((self.cx, self.cy, self.cz), self.radius, z, y, x)
    }

    #[inline]
    pub fn core_contains(&self, z: f32, y: f32, x: f32) -> bool {
        self.core.is_some_and(|c| in_sphere((c.cx, c.cy, c.cz), c.radius, z, y, x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSceneConfig {
    pub height: usize,
    pub width: usize,
    pub blob_count: (usize, usize),
    pub radius: (f32, f32),
    /// Multiplier on blob brightness, one per band.
    pub band_attenuation: Vec<f32>,
    pub noise_sigma: f32,
    pub background_level: f32,
    /// Blob centres are drawn within this many voxels of the middle band.
    pub z_jitter: f32,
    pub seed: u64,
    pub class_set: Vec<String>,
    /// Core radius as a fraction of the blob radius; `None` disables cores.
    pub core_fraction: Option<(f32, f32)>,
    pub core_boost: f32,
}

impl Default for BlobSceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            blob_count: (1, 3),
            radius: (5.0, 10.0),
            band_attenuation: vec![1.0, 0.8, 0.6],
            noise_sigma: 0.1,
            background_level: 0.1,
            z_jitter: 1.0,
            seed: 0,
            class_set: vec!["background".into(), "blob".into()],
            core_fraction: None,
            core_boost: 0.5,
        }
    }
}

impl BlobSceneConfig {
    /// Scenes whose blobs carry an off-centre core, labelled as class 2.
    pub fn with_cores(mut self) -> Self {
        self.core_fraction = Some((0.3, 0.6));
        self.class_set = vec!["background".into(), "blob".into(), "core".into()];
        self
    }

    pub fn validate(&self, bands: usize) -> Result<()> {
        if self.blob_count.0 > self.blob_count.1 {
            return Err(Error::config("blob_count", "min exceeds max"));
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return Err(Error::config("radius", "need 0 < min <= max"));
        }
        if 2.0 * self.radius.1 >= self.height.min(self.width) as f32 {
            return Err(Error::config("radius", "blobs must fit inside the frame"));
        }
        if self.band_attenuation.len() < bands {
            return Err(Error::config(
                "band_attenuation",
                format!("need one value per band ({bands})"),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma", "must be >= 0"));
        }
        if let Some((lo, hi)) = self.core_fraction {
            if !(lo > 0.0 && lo <= hi && hi < 1.0) {
                return Err(Error::config("core_fraction", "need 0 < min <= max < 1"));
            }
            if self.class_set.len() < 3 {
                return Err(Error::config("class_set", "cores need a third class"));
            }
        }
        Ok(())
    }
}

/// Renders ground truth and one intensity volume per modality.
///
/// Modality `k` shows every blob at `brightness * attenuation[k]` over a
/// constant background, plus Gaussian noise, clamped to `[0, 1]`. Core
/// voxels are class 2 and add the core boost to the blob brightness.
pub fn render_blob_volumes(
    blobs: &[Blob],
    shape: (usize, usize, usize),
    modalities: &[String],
    attenuation: &[f32],
    background: f32,
    noise_sigma: f32,
    class_set: &[String],
    rng: &mut impl Rng,
) -> (BTreeMap<String, Volume>, ClassVolume) {
    let (d, h, w) = shape;
    let mut peak = vec![0f32; d * h * w];
    let mut gt = vec![0u8; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let (zf, yf, xf) = (z as f32, y as f32, x as f32);
                for b in blobs {
                    if b.core_contains(zf, yf, xf) {
                        gt[i] = 2;
                        peak[i] = peak[i].max(b.brightness + b.core.map_or(0.0, |c| c.boost));
                    } else if b.contains(zf, yf, xf) {
                        gt[i] = gt[i].max(1);
                        peak[i] = peak[i].max(b.brightness);
                    }
                }
            }
        }
    }
    let normal = Normal::new(0.0f32, noise_sigma.max(0.0)).expect("finite sigma");
    let mut volumes = BTreeMap::new();
    for (k, name) in modalities.iter().enumerate() {
        let att = attenuation[k];
        let data = peak
            .iter()
            .map(|&p| {
                let n = if noise_sigma > 0.0 { normal.sample(rng) } else { 0.0 };
                (background + att * p + n).clamp(0.0, 1.0)
            })
            .collect();
        volumes.insert(
            name.clone(),
            Volume {
                depth: d,
                height: h,
                width: w,
                data,
            },
        );
    }
    (
        volumes,
        ClassVolume {
            depth: d,
            height: h,
            width: w,
            data: gt,
            class_set: class_set.to_vec(),
        },
    )
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// One sphere scene. Deterministic in `(cfg.seed, index)`.
pub fn synthesize_blob_sample(
    cfg: &BlobSceneConfig,
    index: usize,
    gap: &SliceGapConfig,
) -> Result<MultiLayerSample> {
    let n_bands = gap.band_order.len();
    cfg.validate(n_bands)?;
    let depth = gap.slice_index(n_bands.max(1) - 1) + 1;
    gap.validate(depth)?;
    let mut rng = sample_rng(cfg.seed, index);
    let mid = 0.5 * (gap.slice_index(0) + gap.slice_index(n_bands - 1)) as f32;
    let count = rng.random_range(cfg.blob_count.0..=cfg.blob_count.1);
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = rng.random_range(cfg.radius.0..=cfg.radius.1);
        let margin = radius.ceil() + 1.0;
        blobs.push(Blob {
            cx: rng.random_range(margin..=cfg.width as f32 - 1.0 - margin),
            cy: rng.random_range(margin..=cfg.height as f32 - 1.0 - margin),
            cz: mid + rng.random_range(-cfg.z_jitter..=cfg.z_jitter),
            radius,
            brightness: rng.random_range(0.7f32..=1.0),
            core: None,
        });
        if let Some((lo, hi)) = cfg.core_fraction {
            let b = blobs.last_mut().expect("just pushed");
            let r = radius * rng.random_range(lo..=hi);
            // Offset inside the ball of radius R - r keeps the core within the blob.
            let slack = radius - r;
            let (ox, oy, oz) = loop {
                let o: (f32, f32, f32) = (
                    rng.random_range(-1.0f32..=1.0),
                    rng.random_range(-1.0f32..=1.0),
                    rng.random_range(-1.0f32..=1.0),
                );
                if o.0 * o.0 + o.1 * o.1 + o.2 * o.2 <= 1.0 {
                    break o;
                }
            };
            b.core = Some(Core {
                cx: b.cx + ox * slack,
                cy: b.cy + oy * slack,
                cz: b.cz + oz * slack,
                radius: r,
                boost: cfg.core_boost,
            });
        }
    }
    let (volumes, gt) = render_blob_volumes(
        &blobs,
        (depth, cfg.height, cfg.width),
        &gap.band_order,
        &cfg.band_attenuation,
        cfg.background_level,
        cfg.noise_sigma,
        &cfg.class_set,
        &mut rng,
    );
    build_multilayer_from_volumes(
        &format!("blob{index:05}"),
        Timestamp::Tick(index as i64),
        &volumes,
        &gt,
        gap,
    )
}

pub fn synthesize_blob_samples(
    cfg: &BlobSceneConfig,
    n_samples: usize,
    gap: &SliceGapConfig,
) -> Result<Vec<MultiLayerSample>> {
    (0..n_samples)
        .map(|i| synthesize_blob_sample(cfg, i, gap))
        .collect()
}

/// Generates `n_samples` scenes and writes them as a dataset under `out`.
pub fn synthesize_blob_dataset(
    cfg: &BlobSceneConfig,
    n_samples: usize,
    gap: &SliceGapConfig,
    out: &Path,
) -> Result<DatasetManifest> {
    let samples = synthesize_blob_samples(cfg, n_samples, gap)?;
    let bands: Vec<BandId> = gap
        .band_order
        .iter()
        .enumerate()
        .map(|(k, n)| BandId::new(n.clone(), gap.slice_index(k) as i64))
        .collect();
    write_dataset(out, &bands, &cfg.class_set, &samples, None)
}
