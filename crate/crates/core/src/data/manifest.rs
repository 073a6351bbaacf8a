//! `dataset.json` manifests and the on-disk raster, box and mask formats.
//!
//! Layout written by [`write_dataset`]:
//!
//! ```text
//! <root>/dataset.json
//! <root>/<sample>/<band>.png        16-bit grayscale, normalised to [0,1] on load
//! <root>/<sample>/<band>.boxes.csv  x,y,w,h,class_id[,score]
//! <root>/<sample>/<band>.mask.png   8-bit class indices
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{validate_band_order, BandData, BandId, BoundingBox, MultiLayerSample, Raster, SegMask, Timestamp};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRecord {
    pub image: PathBuf,
    pub boxes: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    #[serde(default)]
    pub timestamp: Timestamp,
    pub bands: BTreeMap<String, BandRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
    pub bands: Vec<BandId>,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn band_names(&self) -> Vec<String> {
        self.bands.iter().map(|b| b.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same header, different sample list.
    pub fn with_samples(&self, samples: Vec<SampleRecord>, split: Option<&str>) -> Self {
        Self {
            root: self.root.clone(),
            bands: self.bands.clone(),
            classes: self.classes.clone(),
            split: split.map(str::to_string),
            samples,
        }
    }

    pub fn load_sample(&self, index: usize) -> Result<MultiLayerSample> {
        let rec = &self.samples[index];
        let mut bands = Vec::with_capacity(self.bands.len());
        for band in &self.bands {
            let br = rec.bands.get(&band.name).ok_or_else(|| Error::BandMismatch {
                sample_id: rec.id.clone(),
                band: band.name.clone(),
                problem: "is missing".into(),
            })?;
            let image = read_raster_png(&self.resolve(&br.image))?;
            let boxes = read_boxes_csv(&self.resolve(&br.boxes))?;
            let mask = match &br.mask {
                Some(p) => Some(read_mask_png(&self.resolve(p), &self.classes)?),
                None => None,
            };
            bands.push(BandData {
                band: band.clone(),
                image,
                boxes,
                mask,
            });
        }
        let sample = MultiLayerSample {
            sample_id: rec.id.clone(),
            timestamp: rec.timestamp.clone(),
            bands,
        };
        sample.validate()?;
        Ok(sample)
    }

    pub fn load_all(&self) -> Result<Vec<MultiLayerSample>> {
        (0..self.samples.len()).map(|i| self.load_sample(i)).collect()
    }

    /// Writes this manifest as JSON at `path`. Relative record paths are
    /// rebased when the target directory differs from `root`.
    pub fn save_to(&self, path: &Path) -> Result<()> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut out = self.clone();
        if !same_dir(&dir, &self.root) {
            for s in &mut out.samples {
                for br in s.bands.values_mut() {
                    br.image = self.resolve(&br.image);
                    br.boxes = self.resolve(&br.boxes);
                    br.mask = br.mask.as_ref().map(|m| self.resolve(m));
                }
            }
        }
        let text = serde_json::to_string_pretty(&out).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Checks band sets, file existence, raster sizes and box bounds.
    pub fn validate(&self) -> Result<()> {
        validate_band_order(&self.bands)?;
        if self.classes.is_empty() {
            return Err(Error::Schema("`classes` must not be empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for rec in &self.samples {
            if !seen.insert(rec.id.as_str()) {
                return Err(Error::Schema(format!("duplicate sample id `{}`", rec.id)));
            }
            for name in rec.bands.keys() {
                if !self.bands.iter().any(|b| &b.name == name) {
                    return Err(Error::BandMismatch {
                        sample_id: rec.id.clone(),
                        band: name.clone(),
                        problem: "is not declared in `bands`".into(),
                    });
                }
            }
            let mut frame: Option<(usize, usize)> = None;
            for band in &self.bands {
                let br = rec.bands.get(&band.name).ok_or_else(|| Error::BandMismatch {
                    sample_id: rec.id.clone(),
                    band: band.name.clone(),
                    problem: "is missing".into(),
                })?;
                let exists = |p: &Path| -> Result<PathBuf> {
                    let full = self.resolve(p);
                    if full.is_file() {
                        Ok(full)
                    } else {
                        Err(Error::MissingFile {
                            sample_id: rec.id.clone(),
                            band: band.name.clone(),
                            path: full,
                        })
                    }
                };
                let img = exists(&br.image)?;
                let boxes_path = exists(&br.boxes)?;
                let dims = png_dims(&img)?;
                if let Some(mp) = &br.mask {
                    let mp = exists(mp)?;
                    if png_dims(&mp)? != dims {
                        return Err(Error::BandMismatch {
                            sample_id: rec.id.clone(),
                            band: band.name.clone(),
                            problem: "mask size differs from image size".into(),
                        });
                    }
                }
                match frame {
                    None => frame = Some(dims),
                    Some(f) if f != dims => {
                        return Err(Error::BandMismatch {
                            sample_id: rec.id.clone(),
                            band: band.name.clone(),
                            problem: format!(
                                "has size {}x{}, expected {}x{}",
                                dims.0, dims.1, f.0, f.1
                            ),
                        })
                    }
                    _ => {}
                }
                for b in read_boxes_csv(&boxes_path)? {
                    if !(b.is_valid() && b.within(dims.1, dims.0)) {
                        return Err(Error::BandMismatch {
                            sample_id: rec.id.clone(),
                            band: band.name.clone(),
                            problem: format!("box {:?} outside {}x{} frame", b, dims.0, dims.1),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Reads and eagerly validates a manifest. `path` may be the JSON file or
/// the directory holding `dataset.json`.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile {
            sample_id: "-".into(),
            band: "-".into(),
            path: file.clone(),
        },
        _ => Error::io(&file, e),
    })?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", file.display())))?;
    manifest.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// `(height, width)` from the PNG header.
fn png_dims(path: &Path) -> Result<(usize, usize)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    let info = dec.read_header_info().map_err(|e| png_err(path, e))?;
    Ok((info.height as usize, info.width as usize))
}

fn read_gray_png(path: &Path) -> Result<(usize, usize, png::BitDepth, Vec<u8>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(png_err(path, format!("expected grayscale, got {:?}", info.color_type)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, info.bit_depth, buf))
}

/// 8- or 16-bit grayscale PNG, normalised to `[0, 1]`.
pub fn read_raster_png(path: &Path) -> Result<Raster> {
    let (h, w, depth, buf) = read_gray_png(path)?;
    let data = match depth {
        png::BitDepth::Sixteen => buf
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf.iter().map(|&v| v as f32 / 255.0).collect(),
        d => return Err(png_err(path, format!("unsupported bit depth {d:?}"))),
    };
    Raster::new(h, w, data)
}

/// Quantises to 16 bits; values are clamped to `[0, 1]`.
pub fn write_raster_png(path: &Path, r: &Raster) -> Result<()> {
    let bytes: Vec<u8> = r
        .data
        .iter()
        .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes())
        .collect();
    write_gray_png(path, r.width, r.height, png::BitDepth::Sixteen, &bytes)
}

pub fn read_mask_png(path: &Path, classes: &[String]) -> Result<SegMask> {
    let (h, w, depth, buf) = read_gray_png(path)?;
    if depth != png::BitDepth::Eight {
        return Err(png_err(path, "masks must be 8-bit"));
    }
    SegMask::new(h, w, buf, classes.to_vec())
}

pub fn write_mask_png(path: &Path, m: &SegMask) -> Result<()> {
    write_gray_png(path, m.width, m.height, png::BitDepth::Eight, &m.labels)
}

fn write_gray_png(path: &Path, w: usize, h: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Lines `x,y,w,h,class_id[,score]`, no header.
pub fn read_boxes_csv(path: &Path) -> Result<Vec<BoundingBox>> {
    let csv_err = |m: String| Error::Csv {
        path: path.to_path_buf(),
        message: m,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(e.to_string()))?;
        if rec.len() != 5 && rec.len() != 6 {
            return Err(csv_err(format!("line {}: expected 5 or 6 fields", line + 1)));
        }
        let num = |i: usize| -> Result<f32> {
            rec[i]
                .parse::<f32>()
                .map_err(|e| csv_err(format!("line {}: field {}: {e}", line + 1, i + 1)))
        };
        let class_id = rec[4]
            .parse::<u32>()
            .map_err(|e| csv_err(format!("line {}: class_id: {e}", line + 1)))?;
        let mut b = BoundingBox::new(num(0)?, num(1)?, num(2)?, num(3)?, class_id);
        if rec.len() == 6 {
            b.score = Some(num(5)?);
        }
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(csv_err(format!("line {}: box must have w > 0 and h > 0", line + 1)));
        }
        out.push(b);
    }
    Ok(out)
}

pub fn write_boxes_csv(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::new();
    for b in boxes {
        text.push_str(&format!("{},{},{},{},{}", b.x, b.y, b.w, b.h, b.class_id));
        if let Some(s) = b.score {
            text.push_str(&format!(",{s}"));
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes samples under `root` and returns the matching manifest.
pub fn write_dataset(
    root: &Path,
    bands: &[BandId],
    classes: &[String],
    samples: &[MultiLayerSample],
    split: Option<&str>,
) -> Result<DatasetManifest> {
    validate_band_order(bands)?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate()?;
        let mut map = BTreeMap::new();
        for band in bands {
            let bd = s.band(&band.name).ok_or_else(|| Error::BandMismatch {
                sample_id: s.sample_id.clone(),
                band: band.name.clone(),
                problem: "is missing".into(),
            })?;
            let rel = PathBuf::from(&s.sample_id);
            let image = rel.join(format!("{}.png", band.name));
            let boxes = rel.join(format!("{}.boxes.csv", band.name));
            write_raster_png(&root.join(&image), &bd.image)?;
            write_boxes_csv(&root.join(&boxes), &bd.boxes)?;
            let mask = match &bd.mask {
                Some(m) => {
                    let p = rel.join(format!("{}.mask.png", band.name));
                    write_mask_png(&root.join(&p), m)?;
                    Some(p)
                }
                None => None,
            };
            map.insert(band.name.clone(), BandRecord { image, boxes, mask });
        }
        records.push(SampleRecord {
            id: s.sample_id.clone(),
            timestamp: s.timestamp.clone(),
            bands: map,
        });
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        bands: bands.to_vec(),
        classes: classes.to_vec(),
        split: split.map(str::to_string),
        samples: records,
    };
    manifest.save_to(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> Vec<String> {
        vec!["background".into(), "blob".into()]
    }

    fn bands() -> Vec<BandId> {
        vec![BandId::new("171A", 0), BandId::new("195A", 1)]
    }

    fn sample(i: usize) -> MultiLayerSample {
        let bands = bands()
            .into_iter()
            .enumerate()
            .map(|(k, band)| BandData {
                band,
                image: Raster::from_fn(12, 16, |y, x| ((x + y + k + i) % 5) as f32 / 4.0),
                boxes: vec![BoundingBox::new(1.0, 2.0, 3.0, 4.0, 1)],
                mask: Some(
                    SegMask::new(12, 16, (0..192).map(|p| (p % 2) as u8).collect(), classes())
                        .unwrap(),
                ),
            })
            .collect();
        MultiLayerSample {
            sample_id: format!("s{i}"),
            timestamp: Timestamp::Tick(i as i64),
            bands,
        }
    }

    #[test]
    fn write_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..3).map(sample).collect();
        let written = write_dataset(dir.path(), &bands(), &classes(), &samples, None).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded, written);
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.bands.len(), 2);
        // values k/4 are exact in 16-bit quantisation up to rounding
        for (i, s) in samples.iter().enumerate() {
            let back = loaded.load_sample(i).unwrap();
            for (a, b) in back.bands.iter().zip(&s.bands) {
                assert_eq!(a.boxes, b.boxes);
                assert_eq!(a.mask, b.mask);
                for (x, y) in a.image.data.iter().zip(&b.image.data) {
                    assert!((x - y).abs() <= 0.5 / 65535.0);
                }
            }
        }
    }

    #[test]
    fn missing_band_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..3).map(sample).collect();
        let mut m = write_dataset(dir.path(), &bands(), &classes(), &samples, None).unwrap();
        m.samples[1].bands.remove("195A");
        m.save_to(&dir.path().join(MANIFEST_FILE)).unwrap();
        match load_manifest(dir.path()) {
            Err(Error::BandMismatch { sample_id, band, .. }) => {
                assert_eq!(sample_id, "s1");
                assert_eq!(band, "195A");
            }
            other => panic!("expected band mismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_mask_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..2).map(sample).collect();
        let mut m = write_dataset(dir.path(), &bands(), &classes(), &samples, None).unwrap();
        m.samples[0].bands.get_mut("171A").unwrap().mask = Some("nowhere/mask.png".into());
        m.save_to(&dir.path().join(MANIFEST_FILE)).unwrap();
        match load_manifest(dir.path()) {
            Err(Error::MissingFile { path, sample_id, .. }) => {
                assert!(path.ends_with("nowhere/mask.png"));
                assert_eq!(sample_id, "s0");
            }
            other => panic!("expected missing file, got {other:?}"),
        }
    }

    #[test]
    fn boxes_csv_accepts_optional_score() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        std::fs::write(&p, "1,2,3,4,1\n5.5,6,7,8,1,0.75\n").unwrap();
        let boxes = read_boxes_csv(&p).unwrap();
        assert_eq!(boxes[0], BoundingBox::new(1.0, 2.0, 3.0, 4.0, 1));
        assert_eq!(boxes[1].score, Some(0.75));
        std::fs::write(&p, "1,2,0,4,1\n").unwrap();
        assert!(read_boxes_csv(&p).is_err());
    }

    #[test]
    fn saving_elsewhere_rebases_paths() {
        let dir = tempfile::tempdir().unwrap();
        let other = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..2).map(sample).collect();
        let m = write_dataset(dir.path(), &bands(), &classes(), &samples, None).unwrap();
        let target = other.path().join("train.json");
        m.with_samples(m.samples[..1].to_vec(), Some("train"))
            .save_to(&target)
            .unwrap();
        let back = load_manifest(&target).unwrap();
        assert_eq!(back.split.as_deref(), Some("train"));
        assert_eq!(back.load_sample(0).unwrap().bands[0].boxes, samples[0].bands[0].boxes);
    }
}
