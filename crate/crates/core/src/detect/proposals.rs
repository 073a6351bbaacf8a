use serde::{Deserialize, Serialize};

use crate::data::{BandId, BoundingBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub objectness: f32,
    pub source_band: BandId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalMode {
    Train,
    Test,
}

/// Proposal lists handed to each band's detection head.
///
/// `Train` keeps every band on its own proposals. `Test` gives every band
/// the concatenation of all bands' lists, in band order, without
/// deduplication.
pub fn combine_proposals(per_band: &[Vec<Proposal>], mode: ProposalMode) -> Vec<Vec<Proposal>> {
    match mode {
        ProposalMode::Train => per_band.to_vec(),
        ProposalMode::Test => {
            let union: Vec<Proposal> = per_band.iter().flatten().cloned().collect();
            vec![union; per_band.len()]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn props(band: &str, n: usize) -> Vec<Proposal> {
        (0..n)
            .map(|i| Proposal {
                bbox: BoundingBox::new(i as f32, 0.0, 4.0, 4.0, 1),
                objectness: 0.5,
                source_band: BandId::new(band, 0),
            })
            .collect()
    }

    #[test]
    fn train_mode_is_identity() {
        let input = vec![props("A", 3), props("B", 5)];
        assert_eq!(combine_proposals(&input, ProposalMode::Train), input);
    }

    #[test]
    fn test_mode_gives_union_to_every_band() {
        let input = vec![props("A", 3), props("B", 5)];
        let out = combine_proposals(&input, ProposalMode::Test);
        assert_eq!(out[0].len(), 8);
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0].iter().filter(|p| p.source_band.name == "B").count(), 5);
    }

    #[test]
    fn single_band_test_mode_is_unchanged() {
        let input = vec![props("A", 4)];
        assert_eq!(combine_proposals(&input, ProposalMode::Test), input);
    }
}
