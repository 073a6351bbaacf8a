use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::detect::{augmented, with_validation};
use super::{derive_seed, Task, TrainConfig};
use crate::data::{MultiLayerSample, SegMask};
use crate::error::{Error, Result};
use crate::eval::{IouScores, IouTally};
use crate::nn::{Graph, Tensor};
use crate::segment::{merged_boxes, patch_inputs, patch_labels, PatchLabels, SegConfig, SegModel};

/// One cropped patch with its per-band inputs and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchItem {
    pub sample_id: String,
    /// `inputs[band]`, `P * P` intensities.
    pub inputs: Vec<Vec<f32>>,
    /// `labels[band]`, `P * P` class indices.
    pub labels: Vec<Vec<u8>>,
}

/// Patches cut from the ground-truth boxes of a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub bands: usize,
    pub items: Vec<PatchItem>,
}

impl PatchSet {
    /// Crops every merged box of every sample from all model bands.
    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a MultiLayerSample>,
        cfg: &SegConfig,
    ) -> Result<Self> {
        let p = cfg.patch_size;
        let mut items = Vec::new();
        for s in samples {
            let boxes = merged_boxes(s);
            if boxes.is_empty() {
                continue;
            }
            let inputs = patch_inputs(s, &boxes, cfg)?;
            let labels = patch_labels(s, &boxes, cfg)?;
            for i in 0..boxes.len() {
                items.push(PatchItem {
                    sample_id: s.sample_id.clone(),
                    inputs: inputs.iter().map(|t| t.data[i * p * p..(i + 1) * p * p].to_vec()).collect(),
                    labels: labels.iter().map(|l| l[i * p * p..(i + 1) * p * p].to_vec()).collect(),
                });
            }
        }
        Ok(Self {
            patch_size: p,
            bands: cfg.bands.len(),
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stacks the chosen items into per-band `[N, 1, P, P]` inputs and labels.
    pub fn batch(&self, idx: &[usize]) -> (Vec<Tensor>, PatchLabels) {
        let p = self.patch_size;
        let inputs = (0..self.bands)
            .map(|b| {
                let data = idx.iter().flat_map(|&i| self.items[i].inputs[b].iter().copied()).collect();
                Tensor::from_vec(&[idx.len(), 1, p, p], data)
            })
            .collect();
        let labels = (0..self.bands)
            .map(|b| idx.iter().flat_map(|&i| self.items[i].labels[b].iter().copied()).collect())
            .collect();
        (inputs, labels)
    }

    /// Argmax predictions of `model` for every item, in batches of `batch`.
    pub fn predict(&self, model: &SegModel, batch: usize) -> Result<Vec<Vec<Vec<u8>>>> {
        let pp = self.patch_size * self.patch_size;
        let mut out = Vec::with_capacity(self.len());
        let idx: Vec<usize> = (0..self.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let (inputs, _) = self.batch(chunk);
            let pred = model.predict_labels(&inputs)?;
            for k in 0..chunk.len() {
                out.push(pred.iter().map(|l| l[k * pp..(k + 1) * pp].to_vec()).collect());
            }
        }
        Ok(out)
    }

    /// Same inputs, labels replaced by the model's predictions.
    pub fn relabel(&self, model: &SegModel, batch: usize) -> Result<PatchSet> {
        let pred = self.predict(model, batch)?;
        let mut out = self.clone();
        for (item, labels) in out.items.iter_mut().zip(pred) {
            item.labels = labels;
        }
        Ok(out)
    }

    /// Per-band IoU of the model's predictions against the stored labels.
    pub fn iou(&self, model: &SegModel, batch: usize) -> Result<Vec<IouScores>> {
        let p = self.patch_size;
        let cs = &model.config.class_set;
        let mut tallies: Vec<IouTally> = (0..self.bands).map(|_| IouTally::new(cs.clone())).collect();
        for (item, pred) in self.items.iter().zip(self.predict(model, batch)?) {
            for (b, t) in tallies.iter_mut().enumerate() {
                let pm = SegMask::new(p, p, pred[b].clone(), cs.clone())?;
                let gm = SegMask::new(p, p, item.labels[b].clone(), cs.clone())?;
                t.add(&pm, &gm)?;
            }
        }
        Ok(tallies.iter().map(IouTally::scores).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    /// Weighted cross-entropy per pixel, summed over bands.
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SegTrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub model: SegModel,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<SegEpoch>,
}

/// Mean per-pixel loss over a patch set, without gradients.
pub(super) fn patch_loss(model: &SegModel, set: &PatchSet, batch: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let (inputs, labels) = set.batch(chunk);
        let mut g = Graph::inference(&model.params);
        total += model.training_loss(&mut g, &inputs, &labels)?.1;
    }
    Ok(total / (set.len() * set.patch_size * set.patch_size).max(1) as f64)
}

/// Trains on patch sets. With an empty validation set the training loss
/// selects the best epoch.
pub fn train_segmentation_patches(
    cfg: &TrainConfig,
    seg_cfg: SegConfig,
    train: &PatchSet,
    val: &PatchSet,
) -> Result<SegTrainOutcome> {
    train_from_seed(cfg, seg_cfg, train, val, derive_seed(cfg.seed, 5))
}

pub(super) fn train_from_seed(
    cfg: &TrainConfig,
    seg_cfg: SegConfig,
    train: &PatchSet,
    val: &PatchSet,
    seed: u64,
) -> Result<SegTrainOutcome> {
    cfg.expect_task(Task::Segment)?;
    if train.is_empty() {
        return Err(Error::config("train", "no training patches"));
    }
    let mut model = SegModel::new(seg_cfg, derive_seed(seed, 0))?;
    if train.patch_size != model.config.patch_size || train.bands != model.config.bands.len() {
        return Err(Error::Shape("patch set does not match the model".into()));
    }
    let mut opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let pixels = (train.patch_size * train.patch_size) as f64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (0, f64::INFINITY, model.params.clone());
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs() {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (inputs, labels) = train.batch(chunk);
            let grads = {
                let mut g = Graph::new(&model.params);
                let (root, loss) = model.training_loss(&mut g, &inputs, &labels)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, batch: bi });
                }
                sum += loss;
                g.backward(root)
            };
            if !grads.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            opt.step(&mut model.params, &grads, |_| true);
        }
        let train_loss = sum / (train.len() as f64 * pixels);
        let val_loss = if val.is_empty() {
            patch_loss(&model, train, cfg.batch_size)?
        } else {
            patch_loss(&model, val, cfg.batch_size)?
        };
        if val_loss < best.1 {
            best = (epoch, val_loss, model.params.clone());
        }
        log::info!("segment epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        history.push(SegEpoch {
            epoch,
            train_loss,
            val_loss,
            best_val_loss: best.1,
        });
    }
    let (best_epoch, best_val_loss, params) = best;
    model.params = params;
    if let Some(dir) = &cfg.checkpoint_dir {
        model.save(&dir.join("model"))?;
        let p = dir.join("history.json");
        let text = serde_json::to_string_pretty(&history).expect("history serializes");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(SegTrainOutcome {
        model,
        best_epoch,
        best_val_loss,
        history,
    })
}

/// Trains on patches cropped at the ground-truth boxes of every sample,
/// labelled by the samples' masks (full or weak).
pub fn train_segmentation(
    cfg: &TrainConfig,
    seg_cfg: SegConfig,
    train: &[MultiLayerSample],
    val: &[MultiLayerSample],
) -> Result<SegTrainOutcome> {
    cfg.expect_task(Task::Segment)?;
    let (train_set, val_set) = with_validation(cfg, train, val);
    let train_set = augmented(cfg, train_set);
    let tp = PatchSet::from_samples(&train_set, &seg_cfg)?;
    let vp = PatchSet::from_samples(val_set, &seg_cfg)?;
    train_segmentation_patches(cfg, seg_cfg, &tp, &vp)
}
