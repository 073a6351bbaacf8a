//! Annotation store: the source dataset plus an append-only JSON-lines log
//! per sample (`<store>/log/<sample>.jsonl`). The newest line for a band is
//! its current record; the log is replayed on open.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use mlmt_core::data::{
    load_manifest, read_boxes_csv, read_raster_png, write_boxes_csv, BandRecord, BoundingBox, DatasetManifest,
    Raster, SampleRecord, Timestamp, MANIFEST_FILE,
};

use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub band: String,
    pub boxes: Vec<BoundingBox>,
    /// 0 for the boxes shipped with the dataset; +1 per accepted write.
    pub version: u64,
    pub author: String,
    /// Milliseconds since the Unix epoch; 0 for dataset boxes.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Default)]
pub struct StoreConfig {
    /// `dataset.json` of the images being annotated.
    pub dataset: PathBuf,
    /// Where the logs and exports live.
    pub store_dir: PathBuf,
    /// Band pairs that share one box list.
    pub links: Vec<(String, String)>,
}

pub struct Store {
    manifest: DatasetManifest,
    /// Sample indices in timestamp order.
    order: Vec<usize>,
    position: HashMap<String, usize>,
    /// Band name to every band in its link group, itself included.
    groups: HashMap<String, Vec<String>>,
    store_dir: PathBuf,
    records: RwLock<HashMap<(String, String), AnnotationRecord>>,
    sizes: RwLock<HashMap<String, (usize, usize)>>,
}

impl Store {
    pub fn open(cfg: &StoreConfig) -> Result<Self, ServiceError> {
        let manifest = load_manifest(&cfg.dataset)?;
        let mut order: Vec<usize> = (0..manifest.samples.len()).collect();
        order.sort_by(|&a, &b| {
            let (sa, sb) = (&manifest.samples[a], &manifest.samples[b]);
            sa.timestamp.cmp(&sb.timestamp).then_with(|| sa.id.cmp(&sb.id))
        });
        let position = order
            .iter()
            .enumerate()
            .map(|(p, &i)| (manifest.samples[i].id.clone(), p))
            .collect();
        let groups = link_groups(&manifest.band_names(), &cfg.links)?;
        let log_dir = cfg.store_dir.join("log");
        std::fs::create_dir_all(&log_dir).map_err(|e| ServiceError::io(&log_dir, e))?;
        let store = Self {
            manifest,
            order,
            position,
            groups,
            store_dir: cfg.store_dir.clone(),
            records: RwLock::new(HashMap::new()),
            sizes: RwLock::new(HashMap::new()),
        };
        store.replay()?;
        Ok(store)
    }

    fn replay(&self) -> Result<(), ServiceError> {
        let mut records = self.records.write().unwrap();
        let dir = self.store_dir.join("log");
        for s in &self.manifest.samples {
            let p = log_path(&dir, &s.id);
            let Ok(text) = std::fs::read_to_string(&p) else { continue };
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let rec: AnnotationRecord = serde_json::from_str(line)
                    .map_err(|e| ServiceError::Internal(format!("{}:{}: {e}", p.display(), n + 1)))?;
                records.insert((rec.sample_id.clone(), rec.band.clone()), rec);
            }
        }
        Ok(())
    }

    pub fn bands(&self) -> Vec<String> {
        self.manifest.band_names()
    }

    pub fn band_layer(&self, band: &str) -> Option<i64> {
        self.manifest.bands.iter().find(|b| b.name == band).map(|b| b.layer_index)
    }

    /// Sample ids in timestamp order.
    pub fn sample_ids(&self) -> Vec<&str> {
        self.order.iter().map(|&i| self.manifest.samples[i].id.as_str()).collect()
    }

    pub fn timestamp(&self, id: &str) -> Result<&Timestamp, ServiceError> {
        Ok(&self.sample(id)?.timestamp)
    }

    fn sample(&self, id: &str) -> Result<&SampleRecord, ServiceError> {
        let p = self
            .position
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("sample {id}")))?;
        Ok(&self.manifest.samples[self.order[*p]])
    }

    fn band_record(&self, id: &str, band: &str) -> Result<&BandRecord, ServiceError> {
        self.sample(id)?
            .bands
            .get(band)
            .ok_or_else(|| ServiceError::NotFound(format!("band {band} of sample {id}")))
    }

    /// The target and up to `before`/`after` neighbours, in timestamp order.
    pub fn context(&self, id: &str, before: usize, after: usize) -> Result<Vec<&str>, ServiceError> {
        let p = *self
            .position
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("sample {id}")))?;
        let lo = p.saturating_sub(before);
        let hi = (p + after).min(self.order.len() - 1);
        Ok((lo..=hi).map(|q| self.manifest.samples[self.order[q]].id.as_str()).collect())
    }

    pub fn record(&self, id: &str, band: &str) -> Result<AnnotationRecord, ServiceError> {
        let br = self.band_record(id, band)?;
        if let Some(r) = self.records.read().unwrap().get(&(id.to_string(), band.to_string())) {
            return Ok(r.clone());
        }
        Ok(AnnotationRecord {
            sample_id: id.to_string(),
            band: band.to_string(),
            boxes: read_boxes_csv(&self.manifest.resolve(&br.boxes))?,
            version: 0,
            author: String::new(),
            timestamp: 0,
        })
    }

    pub fn image(&self, id: &str, band: &str) -> Result<Raster, ServiceError> {
        let br = self.band_record(id, band)?;
        Ok(read_raster_png(&self.manifest.resolve(&br.image))?)
    }

    /// `(height, width)` of a sample's rasters.
    pub fn size(&self, id: &str) -> Result<(usize, usize), ServiceError> {
        if let Some(s) = self.sizes.read().unwrap().get(id) {
            return Ok(*s);
        }
        let band = self.manifest.bands[0].name.clone();
        let r = self.image(id, &band)?;
        self.sizes.write().unwrap().insert(id.to_string(), (r.height, r.width));
        Ok((r.height, r.width))
    }

    pub fn linked(&self, band: &str) -> &[String] {
        &self.groups[band]
    }

    /// Optimistic write: accepted iff `expected_version` equals the stored
    /// version of `band`. Every band linked to it receives the same boxes.
    pub fn put(
        &self,
        id: &str,
        band: &str,
        boxes: Vec<BoundingBox>,
        expected_version: u64,
        author: &str,
    ) -> Result<AnnotationRecord, ServiceError> {
        self.band_record(id, band)?;
        let (h, w) = self.size(id)?;
        for b in &boxes {
            if !b.is_valid() || !b.within(w, h) {
                return Err(ServiceError::Invalid(format!(
                    "box ({}, {}, {}, {}) outside the {w}x{h} image",
                    b.x, b.y, b.w, b.h
                )));
            }
        }
        let group = self.linked(band).to_vec();
        // One lock for the whole group keeps linked bands identical.
        let mut records = self.records.write().unwrap();
        let current = |b: &str| -> Result<u64, ServiceError> {
            Ok(match records.get(&(id.to_string(), b.to_string())) {
                Some(r) => r.version,
                None => 0,
            })
        };
        let stored = current(band)?;
        if stored != expected_version {
            return Err(ServiceError::Conflict {
                expected: expected_version,
                current: stored,
            });
        }
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
        let mut new = Vec::with_capacity(group.len());
        for b in &group {
            new.push(AnnotationRecord {
                sample_id: id.to_string(),
                band: b.clone(),
                boxes: boxes.clone(),
                version: current(b)? + 1,
                author: author.to_string(),
                timestamp: now,
            });
        }
        let path = log_path(&self.store_dir.join("log"), id);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ServiceError::io(&path, e))?;
        let mut text = String::new();
        for r in &new {
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(|e| ServiceError::io(&path, e))?;
        let mut out = None;
        for r in new {
            if r.band == band {
                out = Some(r.clone());
            }
            records.insert((id.to_string(), r.band.clone()), r);
        }
        Ok(out.expect("band is in its own group"))
    }

    /// Ids of samples with at least one accepted write, in timestamp order.
    pub fn annotated(&self) -> Vec<&str> {
        let records = self.records.read().unwrap();
        self.sample_ids()
            .into_iter()
            .filter(|id| self.bands().iter().any(|b| records.contains_key(&(id.to_string(), b.clone()))))
            .collect()
    }

    /// Writes every annotated sample as a dataset under `<store>/export`
    /// (images and masks point at the source files) and returns the
    /// manifest path.
    pub fn export(&self) -> Result<(PathBuf, Vec<AnnotationRecord>), ServiceError> {
        let dir = self.store_dir.join("export");
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| ServiceError::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| ServiceError::io(&dir, e))?;
        let mut samples = Vec::new();
        let mut records = Vec::new();
        for id in self.annotated() {
            let src = self.sample(id)?;
            let mut bands = BTreeMap::new();
            for (name, br) in &src.bands {
                let rec = self.record(id, name)?;
                let rel = PathBuf::from(id).join(format!("{name}.boxes.csv"));
                write_boxes_csv(&dir.join(&rel), &rec.boxes)?;
                bands.insert(
                    name.clone(),
                    BandRecord {
                        image: absolute(&self.manifest.resolve(&br.image)),
                        boxes: rel,
                        mask: br.mask.as_ref().map(|m| absolute(&self.manifest.resolve(m))),
                    },
                );
                records.push(rec);
            }
            samples.push(SampleRecord {
                id: id.to_string(),
                timestamp: src.timestamp.clone(),
                bands,
            });
        }
        let mut manifest = self.manifest.with_samples(samples, self.manifest.split.as_deref());
        manifest.root = dir.clone();
        let path = dir.join(MANIFEST_FILE);
        manifest.save_to(&path)?;
        Ok((path, records))
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn log_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.jsonl"))
}

/// Union of the link pairs into groups.
fn link_groups(bands: &[String], links: &[(String, String)]) -> Result<HashMap<String, Vec<String>>, ServiceError> {
    let idx = |b: &str| {
        bands
            .iter()
            .position(|x| x == b)
            .ok_or_else(|| ServiceError::Invalid(format!("linked band {b} is not in the dataset")))
    };
    let mut parent: Vec<usize> = (0..bands.len()).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for (a, b) in links {
        let (ra, rb) = (root(&mut parent, idx(a)?), root(&mut parent, idx(b)?));
        parent[ra.max(rb)] = ra.min(rb);
    }
    let mut out = HashMap::new();
    for (i, b) in bands.iter().enumerate() {
        let r = root(&mut parent, i);
        let group = (0..bands.len())
            .filter(|&j| root(&mut parent, j) == r)
            .map(|j| bands[j].clone())
            .collect();
        out.insert(b.clone(), group);
    }
    Ok(out)
}
