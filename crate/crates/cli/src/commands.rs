use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use mlmt_core::config::RunConfig;
use mlmt_core::data::{
    load_manifest, write_boxes_csv, write_dataset, write_mask_png, BandRecord, BoundingBox, DatasetManifest,
    MultiLayerSample, SampleRecord, SegMask, MANIFEST_FILE,
};
use mlmt_core::detect::{DetectModel, ProposalMode};
use mlmt_core::eval::{agreement as mask_agreement, match_detections, AgreementRow, Counts, EvalReport, IouTally};
use mlmt_core::segment::{merged_boxes, predict_masks, SegModel};
use mlmt_core::synthetic::{
    make_weak_seg_labels, synthesize_blob_dataset, weaken_gt_masks, BlobSceneConfig, SliceGapConfig,
};
use mlmt_core::train::{recursive_train, train_detection, train_segmentation, Task};

use crate::{Common, EvalTask, Failure, DATA_ROOT_ENV};

const SNAPSHOT: &str = "config.resolved.toml";
const PREDICT_CHUNK: usize = 8;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Loads the configuration, applies the flags and writes the resolved
/// snapshot into the output directory.
fn setup(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(Failure::Usage("--workers must be >= 1".into()));
        }
        cfg.workers = w;
    }
    std::fs::create_dir_all(&common.out).map_err(|e| runtime(format!("{}: {e}", common.out.display())))?;
    let p = common.out.join(SNAPSHOT);
    std::fs::write(&p, cfg.to_toml()).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
    log::info!("resolved configuration written to {}", p.display());
    Ok(cfg)
}

fn env_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

/// Relative paths that do not exist here are looked up under the data root.
fn data_path(p: &Path) -> PathBuf {
    match env_root() {
        Some(root) if p.is_relative() && !p.exists() => root.join(p),
        _ => p.to_path_buf(),
    }
}

fn open(p: &Path) -> Result<DatasetManifest, Failure> {
    Ok(load_manifest(data_path(p))?)
}

pub fn build_synthetic(
    common: &Common,
    samples: usize,
    bands: usize,
    gap: usize,
    z0: usize,
    size: usize,
    noise: f32,
    cores: bool,
) -> Result<(), Failure> {
    let cfg = setup(common)?;
    if bands == 0 || gap == 0 {
        return Err(Failure::Usage("--bands and --gap must be >= 1".into()));
    }
    let mut scene = BlobSceneConfig {
        height: size,
        width: size,
        noise_sigma: noise,
        band_attenuation: (0..bands).map(|k| (1.0 - 0.2 * k as f32).max(0.2)).collect(),
        seed: cfg.seed,
        ..Default::default()
    };
    if cores {
        scene = scene.with_cores();
    }
    let slices = SliceGapConfig {
        gap,
        z0,
        band_order: (0..bands).map(|k| format!("b{k}")).collect(),
    };
    let m = synthesize_blob_dataset(&scene, samples, &slices, &common.out)?;
    println!("wrote {} samples with {} bands to {}", m.len(), m.bands.len(), common.out.display());
    Ok(())
}

pub fn gen_weak_labels(common: &Common, data: &Path, erode: Option<usize>) -> Result<(), Failure> {
    let cfg = setup(common)?;
    let m = open(data)?;
    let mut weak = cfg.weak.clone();
    weak.class_set = m.classes.clone();
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let mut s = m.load_sample(i)?;
        for b in &mut s.bands {
            b.mask = Some(match erode {
                Some(r) => {
                    let gt = b.mask.as_ref().ok_or_else(|| {
                        runtime(format!("sample {} band {} has no mask to erode", s.sample_id, b.band.name))
                    })?;
                    weaken_gt_masks(gt, r, weak.background_label)
                }
                None => make_weak_seg_labels(&b.image, &weak)?,
            });
        }
        out.push(s);
    }
    write_dataset(&common.out, &m.bands, &m.classes, &out, m.split.as_deref())?;
    println!("wrote weak labels for {} samples to {}", out.len(), common.out.display());
    Ok(())
}

struct Splits {
    manifest: DatasetManifest,
    train: Vec<MultiLayerSample>,
    val: Vec<MultiLayerSample>,
}

fn training_data(cfg: &RunConfig) -> Result<Splits, Failure> {
    let data = cfg.resolve_data(env_root().as_deref());
    let train = data
        .train
        .ok_or_else(|| Failure::Usage("`data.train` is not set".into()))?;
    let manifest = load_manifest(&train)?;
    let train = manifest.load_all()?;
    let val = match &data.val {
        Some(p) => load_manifest(p)?.load_all()?,
        None => Vec::new(),
    };
    Ok(Splits { manifest, train, val })
}

pub fn train_detect(common: &Common) -> Result<(), Failure> {
    let cfg = setup(common)?;
    let mut t = cfg.train_for(Task::Detect)?;
    t.checkpoint_dir = Some(common.out.clone());
    let d = training_data(&cfg)?;
    let model_cfg = cfg.detect_for(&d.manifest.bands)?;
    let out = train_detection(&t, model_cfg, &d.train, &d.val)?;
    if let Some(last) = out.history.last() {
        println!("trained {} epochs, final val loss {:.4}", out.history.len(), last.val.total());
    }
    Ok(())
}

pub fn train_segment(common: &Common) -> Result<(), Failure> {
    let cfg = setup(common)?;
    let mut t = cfg.train_for(Task::Segment)?;
    t.checkpoint_dir = Some(common.out.clone());
    let d = training_data(&cfg)?;
    let model_cfg = cfg.segment_for(&d.manifest.bands, &d.manifest.classes)?;
    let out = train_segmentation(&t, model_cfg, &d.train, &d.val)?;
    println!("best epoch {} with val loss {:.4}", out.best_epoch, out.best_val_loss);
    Ok(())
}

pub fn train_recursive(common: &Common) -> Result<(), Failure> {
    let cfg = setup(common)?;
    let mut t = cfg.train_for(Task::Segment)?;
    t.checkpoint_dir = Some(common.out.clone());
    let d = training_data(&cfg)?;
    let model_cfg = cfg.segment_for(&d.manifest.bands, &d.manifest.classes)?;
    let out = recursive_train(&t, model_cfg, &d.train, &d.val)?;
    println!("{} rounds, best round {}", out.rounds.len(), out.best_round);
    Ok(())
}

/// Writes a dataset whose images point at the source files and whose boxes
/// and masks are the predictions.
pub fn predict(common: &Common, data: &Path, detector: Option<&Path>, segmenter: Option<&Path>) -> Result<(), Failure> {
    setup(common)?;
    if detector.is_none() && segmenter.is_none() {
        return Err(Failure::Usage("give --detector, --segmenter or both".into()));
    }
    let m = open(data)?;
    let det = detector.map(DetectModel::load).transpose()?;
    let seg = segmenter.map(SegModel::load).transpose()?;
    let bands = match (&det, &seg) {
        (Some(d), Some(s)) if d.config.bands != s.config.bands => {
            return Err(Failure::Usage("detector and segmenter use different bands".into()))
        }
        (Some(d), _) => d.config.bands.clone(),
        (None, Some(s)) => s.config.bands.clone(),
        (None, None) => unreachable!(),
    };
    let classes = seg.as_ref().map_or_else(|| m.classes.clone(), |s| s.config.class_set.clone());
    let mut records = Vec::with_capacity(m.len());
    let indices: Vec<usize> = (0..m.len()).collect();
    for chunk in indices.chunks(PREDICT_CHUNK) {
        let samples = chunk.iter().map(|&i| m.load_sample(i)).collect::<Result<Vec<_>, _>>()?;
        let boxes: Vec<Vec<Vec<BoundingBox>>> = match &det {
            Some(d) => {
                let refs: Vec<&MultiLayerSample> = samples.iter().collect();
                d.detect_batch(&refs, ProposalMode::Test)?
                    .into_iter()
                    .map(|per| per.into_iter().map(|b| b.detections).collect())
                    .collect()
            }
            None => samples.iter().map(|s| vec![merged_boxes(s); bands.len()]).collect(),
        };
        for (s, b) in samples.iter().zip(boxes) {
            let masks: Option<Vec<SegMask>> = match &seg {
                Some(model) => Some(predict_masks(s, &b, model)?),
                None => None,
            };
            let src = &m.samples[m.samples.iter().position(|r| r.id == s.sample_id).expect("sample from manifest")];
            let mut map = BTreeMap::new();
            for (k, band) in bands.iter().enumerate() {
                let rel = PathBuf::from(&s.sample_id);
                let boxes_rel = rel.join(format!("{}.boxes.csv", band.name));
                write_boxes_csv(&common.out.join(&boxes_rel), &b[k])?;
                let mask = match &masks {
                    Some(ms) => {
                        let p = rel.join(format!("{}.mask.png", band.name));
                        write_mask_png(&common.out.join(&p), &ms[k])?;
                        Some(p)
                    }
                    None => None,
                };
                let image = m.resolve(&src.bands[&band.name].image);
                map.insert(
                    band.name.clone(),
                    BandRecord {
                        image: std::path::absolute(&image).unwrap_or(image),
                        boxes: boxes_rel,
                        mask,
                    },
                );
            }
            records.push(SampleRecord {
                id: s.sample_id.clone(),
                timestamp: s.timestamp.clone(),
                bands: map,
            });
        }
    }
    let out = DatasetManifest {
        root: common.out.clone(),
        bands,
        classes,
        split: m.split.clone(),
        samples: records,
    };
    out.save_to(&common.out.join(MANIFEST_FILE))?;
    println!("wrote predictions for {} samples to {}", out.len(), common.out.display());
    Ok(())
}

/// Ground truth keyed by sample id.
fn by_id(m: &DatasetManifest) -> Result<HashMap<String, MultiLayerSample>, Failure> {
    Ok(m.load_all()?.into_iter().map(|s| (s.sample_id.clone(), s)).collect())
}

pub fn evaluate(common: &Common, pred: &Path, gt: &Path, task: EvalTask) -> Result<(), Failure> {
    setup(common)?;
    let pm = open(pred)?;
    let gm = open(gt)?;
    let gts = by_id(&gm)?;
    let preds = pm.load_all()?;
    let mut report = EvalReport::default();
    for (k, band) in pm.bands.iter().enumerate() {
        if !gm.bands.iter().any(|b| b.name == band.name) {
            return Err(runtime(format!("band {} is not in the ground truth", band.name)));
        }
        let mut counts = Counts::default();
        let mut tally = IouTally::new(gm.classes.clone());
        for p in &preds {
            let g = gts
                .get(&p.sample_id)
                .ok_or_else(|| runtime(format!("sample {} is not in the ground truth", p.sample_id)))?;
            let gb = g.band(&band.name).expect("band checked above");
            match task {
                EvalTask::Detect => counts.add(match_detections(&p.bands[k].boxes, &gb.boxes).counts()),
                EvalTask::Segment => {
                    let (pmask, gmask) = match (&p.bands[k].mask, &gb.mask) {
                        (Some(a), Some(b)) => (a, b),
                        _ => return Err(runtime(format!("sample {} band {} lacks a mask", p.sample_id, band.name))),
                    };
                    tally.add(pmask, gmask)?;
                }
            }
        }
        match task {
            EvalTask::Detect => report.add_detection(band.name.clone(), counts),
            EvalTask::Segment => report.add_segmentation(band.name.clone(), tally.scores()),
        }
    }
    report.config = serde_json::json!({ "task": format!("{task:?}").to_lowercase(), "samples": preds.len() });
    report.write(&common.out)?;
    print!("{}", report.table_csv());
    Ok(())
}

/// Pools every sample's mask into one tall mask per band and compares.
pub fn agreement(common: &Common, a: &Path, b: &Path, class_id: u8) -> Result<(), Failure> {
    setup(common)?;
    let am = open(a)?;
    let bm = open(b)?;
    let bs = by_id(&bm)?;
    let samples = am.load_all()?;
    let mut report = EvalReport::default();
    for band in &am.bands {
        if !bm.bands.iter().any(|x| x.name == band.name) {
            continue;
        }
        let mut stacked: [Option<SegMask>; 2] = [None, None];
        for s in &samples {
            let other = bs
                .get(&s.sample_id)
                .ok_or_else(|| runtime(format!("sample {} missing from {}", s.sample_id, b.display())))?;
            for (slot, src) in stacked.iter_mut().zip([s, other]) {
                let m = src
                    .band(&band.name)
                    .and_then(|x| x.mask.as_ref())
                    .ok_or_else(|| runtime(format!("sample {} band {} lacks a mask", s.sample_id, band.name)))?;
                match slot {
                    Some(acc) => {
                        if acc.width != m.width {
                            return Err(runtime("masks differ in width"));
                        }
                        acc.labels.extend_from_slice(&m.labels);
                        acc.height += m.height;
                    }
                    None => *slot = Some(m.clone()),
                }
            }
        }
        if let [Some(x), Some(y)] = &stacked {
            report.agreement.push(AgreementRow {
                band: band.name.clone(),
                class_id,
                iou: mask_agreement(x, y, class_id)?,
            });
        }
    }
    report.write(&common.out)?;
    print!("{}", report.table_csv());
    Ok(())
}

pub fn serve(common: &Common, data: &Path, links: &[String], addr: SocketAddr) -> Result<(), Failure> {
    setup(common)?;
    let links = links
        .iter()
        .map(|l| {
            l.split_once(':')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Failure::Usage(format!("--link expects A:B, got {l}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let store = mlmt_label_service::Store::open(&mlmt_label_service::StoreConfig {
        dataset: data_path(data),
        store_dir: common.out.clone(),
        links,
    })
    .map_err(runtime)?;
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(mlmt_label_service::serve(store, addr)).map_err(runtime)
}
