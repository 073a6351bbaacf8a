use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }
}

/// Seeded shuffle, then contiguous train/val/test cuts. Sizes are rounded
/// from the fractions; test takes the remainder.
pub fn split_dataset(
    manifest: &DatasetManifest,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    let f = [fractions.train, fractions.val, fractions.test];
    if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Split(format!("fractions must be non-negative, got {f:?}")));
    }
    if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("fractions must sum to 1, got {f:?}")));
    }
    let n = manifest.samples.len();
    let n_train = ((f[0] * n as f64).round() as usize).min(n);
    let n_val = ((f[1] * n as f64).round() as usize).min(n - n_train);
    let n_test = n - n_train - n_val;
    for (name, frac, count) in [("train", f[0], n_train), ("val", f[1], n_val), ("test", f[2], n_test)] {
        if frac > 0.0 && count == 0 {
            return Err(Error::Split(format!(
                "{name} split is empty: {n} samples is too few for fraction {frac}"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| manifest.samples[i].clone()).collect();
    Ok((
        manifest.with_samples(pick(&order[..n_train]), Some("train")),
        manifest.with_samples(pick(&order[n_train..n_train + n_val]), Some("val")),
        manifest.with_samples(pick(&order[n_train + n_val..]), Some("test")),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BandId, SampleRecord, Timestamp};
    use std::collections::{BTreeMap, HashSet};

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            root: ".".into(),
            bands: vec![BandId::new("3934A", 0)],
            classes: vec!["ar".into()],
            split: None,
            samples: (0..n)
                .map(|i| SampleRecord {
                    id: format!("s{i}"),
                    timestamp: Timestamp::Tick(i as i64),
                    bands: BTreeMap::new(),
                })
                .collect(),
        }
    }

    #[test]
    fn lad_sized_split() {
        let m = manifest(266);
        let (tr, va, te) = split_dataset(&m, SplitFractions::new(213.0 / 266.0, 0.0, 53.0 / 266.0), 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (213, 0, 53));
        let ids: HashSet<_> = tr.samples.iter().chain(&te.samples).map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), 266);
    }

    #[test]
    fn all_train() {
        let (tr, va, te) = split_dataset(&manifest(10), SplitFractions::new(1.0, 0.0, 0.0), 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (10, 0, 0));
    }

    #[test]
    fn deterministic_for_seed() {
        let m = manifest(50);
        let a = split_dataset(&m, SplitFractions::new(0.6, 0.2, 0.2), 9).unwrap();
        let b = split_dataset(&m, SplitFractions::new(0.6, 0.2, 0.2), 9).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&m, SplitFractions::new(0.6, 0.2, 0.2), 10).unwrap();
        assert_ne!(a.0.samples, c.0.samples);
    }

    #[test]
    fn rejects_bad_fractions_and_tiny_datasets() {
        assert!(split_dataset(&manifest(10), SplitFractions::new(0.5, 0.2, 0.2), 0).is_err());
        assert!(split_dataset(&manifest(10), SplitFractions::new(1.2, -0.2, 0.0), 0).is_err());
        assert!(matches!(
            split_dataset(&manifest(2), SplitFractions::new(0.8, 0.1, 0.1), 0),
            Err(Error::Split(_))
        ));
    }
}
