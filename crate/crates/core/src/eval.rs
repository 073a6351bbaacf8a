//! Detection matching, precision/recall/F1, IoU scores and report output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BoundingBox, SegMask};
use crate::error::{Error, Result};

/// A prediction may match a ground-truth box when their intersection
/// covers at least half of either box.
pub fn eligible(pred: &BoundingBox, gt: &BoundingBox) -> bool {
    let inter = pred.intersection(gt);
    inter > 0.0 && inter >= 0.5 * pred.area().min(gt.area())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(prediction index, gt index)` pairs.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.matches.len(),
            fp: self.unmatched_preds.len(),
            fn_: self.unmatched_gts.len(),
        }
    }
}

/// One-to-one matching of predictions to ground truth.
///
/// Predictions are visited in descending score order; each takes the free
/// eligible GT with the largest intersection. When every eligible GT is
/// taken, earlier assignments are shifted along an augmenting path if that
/// frees one, so the number of matches is always the maximum possible and
/// higher-scoring predictions are never displaced by lower ones.
pub fn match_detections(preds: &[BoundingBox], gts: &[BoundingBox]) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    let score = |i: usize| preds[i].score.unwrap_or(0.0);
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    // Candidate GTs per prediction, largest intersection first.
    let cands: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            let mut c: Vec<usize> = (0..gts.len()).filter(|&g| eligible(p, &gts[g])).collect();
            c.sort_by(|&a, &b| p.intersection(&gts[b]).total_cmp(&p.intersection(&gts[a])).then(a.cmp(&b)));
            c
        })
        .collect();
    let mut gt_owner: Vec<Option<usize>> = vec![None; gts.len()];

    fn augment(p: usize, cands: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &g in &cands[p] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].is_none_or(|q| augment(q, cands, owner, seen)) {
                owner[g] = Some(p);
                return true;
            }
        }
        false
    }

    for &p in &order {
        // Direct pick first so uncontested predictions keep their best GT.
        if let Some(&g) = cands[p].iter().find(|&&g| gt_owner[g].is_none()) {
            gt_owner[g] = Some(p);
            continue;
        }
        let mut seen = vec![false; gts.len()];
        augment(p, &cands, &mut gt_owner, &mut seen);
    }
    let mut matches: Vec<(usize, usize)> = gt_owner
        .iter()
        .enumerate()
        .filter_map(|(g, o)| o.map(|p| (p, g)))
        .collect();
    matches.sort_unstable();
    let matched_p: Vec<bool> = (0..preds.len()).map(|p| matches.iter().any(|m| m.0 == p)).collect();
    MatchResult {
        unmatched_preds: (0..preds.len()).filter(|&p| !matched_p[p]).collect(),
        unmatched_gts: (0..gts.len()).filter(|&g| gt_owner[g].is_none()).collect(),
        matches,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn prf1(c: Counts) -> Prf1 {
    let ratio = |a: usize, b: usize| if b == 0 { None } else { Some(a as f64 / b as f64) };
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    let (precision, recall) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf1 {
        precision,
        recall,
        f1,
        degenerate: p.is_none() || r.is_none(),
    }
}

/// Per-class intersection and union pixel counts, summed over masks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IouTally {
    pub class_set: Vec<String>,
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouTally {
    pub fn new(class_set: Vec<String>) -> Self {
        let k = class_set.len();
        Self {
            class_set,
            intersection: vec![0; k],
            union: vec![0; k],
        }
    }

    pub fn add(&mut self, pred: &SegMask, gt: &SegMask) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        if pred.class_set != gt.class_set || pred.class_set != self.class_set {
            return Err(Error::Schema("masks use different class sets".into()));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if p == g {
                self.intersection[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[g as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> IouScores {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        IouScores {
            class_set: self.class_set.clone(),
            skipped: per_class.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(c, _)| c).collect(),
            mean: if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            },
            per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouScores {
    pub class_set: Vec<String>,
    /// `None` for classes absent from both masks.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes that were present.
    pub mean: f64,
    pub skipped: Vec<usize>,
}

pub fn iou_scores(pred: &SegMask, gt: &SegMask) -> Result<IouScores> {
    let mut t = IouTally::new(gt.class_set.clone());
    t.add(pred, gt)?;
    Ok(t.scores())
}

/// IoU of one class between two methods' masks; `None` when neither mask
/// contains the class.
pub fn agreement(a: &SegMask, b: &SegMask, class_id: u8) -> Result<Option<f64>> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!("mask {}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &q) in a.labels.iter().zip(&b.labels) {
        let (x, y) = (p == class_id, q == class_id);
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    Ok((union > 0).then(|| inter as f64 / union as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub band: String,
    pub counts: Counts,
    #[serde(flatten)]
    pub scores: Prf1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRow {
    pub band: String,
    #[serde(flatten)]
    pub scores: IouScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub band: String,
    pub class_id: u8,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detection: Vec<DetectionRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub segmentation: Vec<SegmentationRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agreement: Vec<AgreementRow>,
    #[serde(default)]
    pub config: serde_json::Value,
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

impl EvalReport {
    pub fn add_detection(&mut self, band: impl Into<String>, counts: Counts) {
        self.detection.push(DetectionRow {
            band: band.into(),
            counts,
            scores: prf1(counts),
        });
    }

    pub fn add_segmentation(&mut self, band: impl Into<String>, scores: IouScores) {
        self.segmentation.push(SegmentationRow {
            band: band.into(),
            scores,
        });
    }

    /// Table rows: `band,precision,recall,f1` for detection, then
    /// `band,<class IoU...>,mean` for segmentation, then
    /// `band,class_id,agreement`. Values use two decimals.
    pub fn table_csv(&self) -> String {
        let mut out = String::new();
        if !self.detection.is_empty() {
            out.push_str("band,precision,recall,f1\n");
            for r in &self.detection {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    r.band,
                    fmt2(r.scores.precision),
                    fmt2(r.scores.recall),
                    fmt2(r.scores.f1)
                ));
            }
        }
        if let Some(first) = self.segmentation.first() {
            out.push_str("band");
            for c in &first.scores.class_set {
                out.push_str(&format!(",{c}"));
            }
            out.push_str(",mean\n");
            for r in &self.segmentation {
                out.push_str(&r.band);
                for v in &r.scores.per_class {
                    out.push(',');
                    out.push_str(&v.map(fmt2).unwrap_or_else(|| "-".into()));
                }
                out.push_str(&format!(",{}\n", fmt2(r.scores.mean)));
            }
        }
        if !self.agreement.is_empty() {
            out.push_str("band,class_id,agreement\n");
            for r in &self.agreement {
                let v = r.iou.map(fmt2).unwrap_or_else(|| "-".into());
                out.push_str(&format!("{},{},{}\n", r.band, r.class_id, v));
            }
        }
        out
    }

    /// Writes `report.json` and `table.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
        let p = dir.join("table.csv");
        std::fs::write(&p, self.table_csv()).map_err(|e| Error::io(&p, e))
    }
}
