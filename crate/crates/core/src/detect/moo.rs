//! Per-stage best-weight tracking: each network stage keeps the weights
//! from the epoch where its own loss was lowest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{load_weights, save_weights, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FeatureExtraction,
    Rpn,
    Detection,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::FeatureExtraction, Stage::Rpn, Stage::Detection];

    pub fn name(self) -> &'static str {
        match self {
            Stage::FeatureExtraction => "feature_extraction",
            Stage::Rpn => "rpn",
            Stage::Detection => "detection",
        }
    }

    /// Parameter-name prefix owned by the stage.
    pub fn prefix(self) -> &'static str {
        match self {
            Stage::FeatureExtraction => "backbone.",
            Stage::Rpn => "rpn.",
            Stage::Detection => "head.",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// One loss value per stage, indexed like [`Stage::ALL`].
pub type StageLosses = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub weights: Vec<(String, Tensor)>,
    pub best_loss: f64,
    pub epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageMeta {
    best_loss: f64,
    epoch: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageCheckpointSet {
    pub stages: [Option<StageRecord>; 3],
}

impl StageCheckpointSet {
    pub fn get(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages[stage.index()].as_ref()
    }

    /// Copies every stored stage snapshot into `params`.
    pub fn assemble(&self, params: &mut ParamStore) -> Result<()> {
        for rec in self.stages.iter().flatten() {
            params.load_snapshot(&rec.weights)?;
        }
        Ok(())
    }

    /// Writes `<dir>/<stage>/{weights.bin, meta.json}` for every stored stage.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for stage in Stage::ALL {
            let Some(rec) = self.get(stage) else { continue };
            let sd = dir.join(stage.name());
            save_weights(&sd.join("weights.bin"), &rec.weights)?;
            let meta = StageMeta {
                best_loss: rec.best_loss,
                epoch: rec.epoch,
            };
            let p = sd.join("meta.json");
            let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut out = Self::default();
        for stage in Stage::ALL {
            let sd = dir.join(stage.name());
            if !sd.exists() {
                continue;
            }
            let p = sd.join("meta.json");
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let meta: StageMeta = serde_json::from_str(&text).map_err(|e| Error::Json { path: p.clone(), source: e })?;
            out.stages[stage.index()] = Some(StageRecord {
                weights: load_weights(&sd.join("weights.bin"))?,
                best_loss: meta.best_loss,
                epoch: meta.epoch,
            });
        }
        if out.stages.iter().all(Option::is_none) {
            return Err(Error::Checkpoint(format!("no stage checkpoints under {}", dir.display())));
        }
        Ok(out)
    }
}

/// Replaces a stage's snapshot with the current weights iff its loss is
/// strictly below the stored best. Non-finite losses never update.
pub fn moo_update(
    mut store: StageCheckpointSet,
    epoch: usize,
    losses: StageLosses,
    params: &ParamStore,
) -> StageCheckpointSet {
    for stage in Stage::ALL {
        let loss = losses[stage.index()];
        if !loss.is_finite() {
            continue;
        }
        let improved = store
            .get(stage)
            .is_none_or(|rec| loss < rec.best_loss);
        if improved {
            store.stages[stage.index()] = Some(StageRecord {
                weights: params.snapshot(|n| n.starts_with(stage.prefix())),
                best_loss: loss,
                epoch,
            });
        }
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(v: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("backbone.w", Tensor::scalar(v));
        p.add("rpn.w", Tensor::scalar(v));
        p.add("head.w", Tensor::scalar(v));
        p
    }

    fn epochs(s: &StageCheckpointSet) -> Vec<usize> {
        Stage::ALL.iter().map(|&st| s.get(st).unwrap().epoch).collect()
    }

    #[test]
    fn stages_update_independently() {
        let s = moo_update(StageCheckpointSet::default(), 1, [1.0, 2.0, 3.0], &params(1.0));
        let s = moo_update(s, 2, [0.5, 2.5, 3.0], &params(2.0));
        assert_eq!(epochs(&s), vec![2, 1, 1]);
        let mut p = params(0.0);
        s.assemble(&mut p).unwrap();
        assert_eq!(p.value(p.id("backbone.w").unwrap()).data[0], 2.0);
        assert_eq!(p.value(p.id("rpn.w").unwrap()).data[0], 1.0);
    }

    #[test]
    fn no_improvement_is_idempotent() {
        let s = moo_update(StageCheckpointSet::default(), 1, [1.0, 1.0, 1.0], &params(1.0));
        let again = moo_update(s.clone(), 2, [1.0, 3.0, f64::NAN], &params(5.0));
        assert_eq!(again, s);
    }

    #[test]
    fn save_and_load_roundtrip() {
        let s = moo_update(StageCheckpointSet::default(), 3, [1.0, 2.0, 3.0], &params(1.5));
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        assert!(dir.path().join("rpn/meta.json").exists());
        assert_eq!(StageCheckpointSet::load(dir.path()).unwrap(), s);
    }
}
