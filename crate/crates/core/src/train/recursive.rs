use std::path::Path;

use serde::{Deserialize, Serialize};

use super::detect::{augmented, with_validation};
use super::segment::{train_from_seed, PatchSet};
use super::{derive_seed, Task, TrainConfig};
use crate::data::MultiLayerSample;
use crate::error::{Error, Result};
use crate::segment::{SegConfig, SegModel};

/// Required improvement for a round to count as a decrease.
pub const ROUND_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub best_epoch: usize,
    /// Training loss at the selected epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean IoU of the round's predictions against the validation labels.
    pub val_mean_iou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RecursiveOutcome {
    /// Model of the round with the lowest validation loss.
    pub model: SegModel,
    pub best_round: usize,
    pub rounds: Vec<RoundReport>,
    /// Every executed round's model, in order.
    pub round_models: Vec<SegModel>,
}

/// Recursive weak-label training on patch sets.
///
/// Round 1 fits the weak labels. Every later round starts from fresh
/// weights and fits the previous round's argmax predictions on the same
/// training patches. Validation keeps its original labels throughout.
/// Stops at the first round whose validation loss is not at least
/// [`ROUND_TOLERANCE`] below the previous one, or after
/// `max_recursion_rounds`.
pub fn recursive_train_patches(
    cfg: &TrainConfig,
    seg_cfg: SegConfig,
    weak_train: &PatchSet,
    weak_val: &PatchSet,
) -> Result<RecursiveOutcome> {
    cfg.expect_task(Task::Segment)?;
    let mut labels = weak_train.clone();
    let mut rounds = Vec::new();
    let mut models: Vec<SegModel> = Vec::new();
    let base = derive_seed(cfg.seed, 5);
    for round in 1..=cfg.max_recursion_rounds {
        let seed = if round == 1 { base } else { derive_seed(base, round as u64) };
        let mut round_cfg = cfg.clone();
        round_cfg.checkpoint_dir = cfg.checkpoint_dir.as_ref().map(|d| d.join(format!("round{round}")));
        let out = train_from_seed(&round_cfg, seg_cfg.clone(), &labels, weak_val, seed)?;
        let train_loss = out
            .history
            .iter()
            .find(|e| e.epoch == out.best_epoch)
            .map_or(f64::NAN, |e| e.train_loss);
        let val_mean_iou = if weak_val.is_empty() {
            None
        } else {
            let scores = weak_val.iou(&out.model, cfg.batch_size)?;
            let means: Vec<f64> = scores.iter().map(|s| s.mean).filter(|m| m.is_finite()).collect();
            (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
        };
        log::info!("round {round}: val loss {:.5}", out.best_val_loss);
        rounds.push(RoundReport {
            round,
            best_epoch: out.best_epoch,
            train_loss,
            val_loss: out.best_val_loss,
            val_mean_iou,
        });
        models.push(out.model);
        if round >= 2 && rounds[round - 1].val_loss >= rounds[round - 2].val_loss - ROUND_TOLERANCE {
            break;
        }
        if round < cfg.max_recursion_rounds {
            labels = labels.relabel(models.last().expect("just pushed"), cfg.batch_size)?;
        }
    }
    let best = rounds
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.val_loss.total_cmp(&b.1.val_loss).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("at least one round");
    if let Some(dir) = &cfg.checkpoint_dir {
        models[best].save(&dir.join("best"))?;
        write_rounds(&dir.join("rounds.json"), &rounds)?;
    }
    Ok(RecursiveOutcome {
        model: models[best].clone(),
        best_round: best + 1,
        rounds,
        round_models: models,
    })
}

/// Recursive training from samples carrying weak masks.
pub fn recursive_train(
    cfg: &TrainConfig,
    seg_cfg: SegConfig,
    weak_train: &[MultiLayerSample],
    weak_val: &[MultiLayerSample],
) -> Result<RecursiveOutcome> {
    cfg.expect_task(Task::Segment)?;
    let (t, v) = with_validation(cfg, weak_train, weak_val);
    let t = augmented(cfg, t);
    let tp = PatchSet::from_samples(&t, &seg_cfg)?;
    let vp = PatchSet::from_samples(v, &seg_cfg)?;
    recursive_train_patches(cfg, seg_cfg, &tp, &vp)
}

pub fn write_rounds(path: &Path, rounds: &[RoundReport]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(rounds).expect("rounds serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BandId;
    use crate::train::segment::PatchItem;

    fn set(n: usize, p: usize) -> PatchSet {
        let items = (0..n)
            .map(|i| {
                let inputs: Vec<f32> = (0..p * p).map(|k| ((k * 7 + i * 3) % 5) as f32 / 4.0).collect();
                let labels = inputs.iter().map(|&v| u8::from(v > 0.6)).collect::<Vec<u8>>();
                PatchItem {
                    sample_id: format!("s{i}"),
                    inputs: vec![inputs; 2],
                    labels: vec![labels; 2],
                }
            })
            .collect();
        PatchSet {
            patch_size: p,
            bands: 2,
            items,
        }
    }

    fn seg_cfg() -> SegConfig {
        let mut c = SegConfig::desk(
            vec![BandId::new("a", 0), BandId::new("b", 1)],
            vec!["bg".into(), "fg".into()],
        );
        c.patch_size = 8;
        c
    }

    fn cfg(rounds: usize) -> TrainConfig {
        let mut c = TrainConfig::new(Task::Segment);
        c.epochs = Some(3);
        c.max_recursion_rounds = rounds;
        c
    }

    #[test]
    fn single_round_equals_plain_training() {
        let (t, v) = (set(4, 8), set(2, 8));
        let r = recursive_train_patches(&cfg(1), seg_cfg(), &t, &v).unwrap();
        let plain = super::super::train_segmentation_patches(&cfg(1), seg_cfg(), &t, &v).unwrap();
        assert_eq!(r.rounds.len(), 1);
        assert_eq!(r.model.params.snapshot(|_| true), plain.model.params.snapshot(|_| true));
    }

    #[test]
    fn stopping_rule_and_best_round() {
        let (t, v) = (set(4, 8), set(2, 8));
        let r = recursive_train_patches(&cfg(4), seg_cfg(), &t, &v).unwrap();
        let losses: Vec<f64> = r.rounds.iter().map(|x| x.val_loss).collect();
        let n = losses.len();
        for k in 1..n - 1 {
            assert!(losses[k] < losses[k - 1] - ROUND_TOLERANCE);
        }
        if n < 4 {
            assert!(losses[n - 1] >= losses[n - 2] - ROUND_TOLERANCE);
        }
        let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(r.rounds[r.best_round - 1].val_loss, min);
    }
}
