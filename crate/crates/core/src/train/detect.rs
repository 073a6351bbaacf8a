use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Task, TrainConfig};
use crate::data::{augment, MultiLayerSample};
use crate::detect::{moo_update, DetectConfig, DetectLosses, DetectModel, StageCheckpointSet};
use crate::error::{Error, Result};
use crate::nn::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectEpoch {
    pub epoch: usize,
    pub train: DetectLosses,
    pub val: DetectLosses,
}

#[derive(Debug, Clone)]
pub struct DetectTrainOutcome {
    /// Model assembled from the best snapshot of every stage.
    pub model: DetectModel,
    pub checkpoints: StageCheckpointSet,
    pub history: Vec<DetectEpoch>,
}

/// Splits off a validation tail when none is supplied.
pub(super) fn with_validation<'a>(
    cfg: &TrainConfig,
    train: &'a [MultiLayerSample],
    val: &'a [MultiLayerSample],
) -> (Vec<&'a MultiLayerSample>, Vec<&'a MultiLayerSample>) {
    if !val.is_empty() || cfg.val_fraction == 0.0 || train.len() < 2 {
        return (train.iter().collect(), val.iter().collect());
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1)));
    let n_val = ((train.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, train.len() - 1);
    let (v, t) = idx.split_at(n_val);
    (t.iter().map(|&i| &train[i]).collect(), v.iter().map(|&i| &train[i]).collect())
}

pub(super) fn augmented(cfg: &TrainConfig, samples: Vec<&MultiLayerSample>) -> Vec<MultiLayerSample> {
    samples.into_iter().flat_map(|s| augment(s, &cfg.augment)).collect()
}

fn evaluate(model: &DetectModel, samples: &[&MultiLayerSample], batch: usize, seed: u64) -> Result<DetectLosses> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = DetectLosses::default();
    let mut batches = 0;
    for chunk in samples.chunks(batch) {
        let mut g = Graph::inference(&model.params);
        let (_, l) = model.training_loss(&mut g, chunk, &mut rng)?;
        sum.rpn += l.rpn;
        sum.head += l.head;
        batches += 1;
    }
    let n = batches.max(1) as f64;
    Ok(DetectLosses {
        rpn: sum.rpn / n,
        head: sum.head / n,
    })
}

/// Trains every band's branch, RPN and head jointly.
///
/// RPN and head targets always come from each band's own ground truth and
/// heads only see their own band's proposals. After every epoch each
/// stage's weights are kept if its validation loss reached a new minimum:
/// the backbone on the total loss, the RPNs on the RPN loss and the heads
/// on the head loss. The returned model assembles the best stages.
pub fn train_detection(
    cfg: &TrainConfig,
    model_cfg: DetectConfig,
    train: &[MultiLayerSample],
    val: &[MultiLayerSample],
) -> Result<DetectTrainOutcome> {
    cfg.expect_task(Task::Detect)?;
    if train.is_empty() {
        return Err(Error::config("train", "training set is empty"));
    }
    let (train_set, val_set) = with_validation(cfg, train, val);
    let train_set = augmented(cfg, train_set);
    let mut model = DetectModel::new(model_cfg, derive_seed(cfg.seed, 2))?;
    let mut opt = cfg.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let mut store = StageCheckpointSet::default();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs() {
        order.shuffle(&mut rng);
        let mut sum = DetectLosses::default();
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&MultiLayerSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let grads = {
                let mut g = Graph::new(&model.params);
                let (root, l) = model.training_loss(&mut g, &batch, &mut rng)?;
                if !l.total().is_finite() {
                    return Err(Error::Divergence { epoch, batch: bi });
                }
                sum.rpn += l.rpn;
                sum.head += l.head;
                batches += 1;
                g.backward(root)
            };
            if !grads.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            opt.step(&mut model.params, &grads, |_| true);
        }
        let n = batches.max(1) as f64;
        let train_l = DetectLosses {
            rpn: sum.rpn / n,
            head: sum.head / n,
        };
        let val_l = if val_set.is_empty() {
            train_l
        } else {
            evaluate(&model, &val_set, cfg.batch_size, derive_seed(cfg.seed, 4))?
        };
        store = moo_update(store, epoch, [val_l.total(), val_l.rpn, val_l.head], &model.params);
        log::info!(
            "detect epoch {epoch}: train {:.4} (rpn {:.4}, head {:.4}) val {:.4}",
            train_l.total(),
            train_l.rpn,
            train_l.head,
            val_l.total()
        );
        history.push(DetectEpoch {
            epoch,
            train: train_l,
            val: val_l,
        });
    }
    store.assemble(&mut model.params)?;
    if let Some(dir) = &cfg.checkpoint_dir {
        store.save(dir)?;
        model.save(&dir.join("model"))?;
        let p = dir.join("history.json");
        let text = serde_json::to_string_pretty(&history).expect("history serializes");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(DetectTrainOutcome {
        model,
        checkpoints: store,
        history,
    })
}
