//! Class-weighted categorical cross-entropy summed over bands, classes and
//! pixels.

/// Probabilities are clamped to at least this value inside the logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Solar three-class weights: active region, quiet sun, off-disk.
pub const SOLAR_CLASS_WEIGHTS: [f64; 3] = [2.0, 1.0, 2.0];

/// One band's pixels. `probs` is pixel-major: `probs[i * classes + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegBandTerms {
    pub classes: usize,
    pub labels: Vec<u8>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegBatch {
    pub bands: Vec<SegBandTerms>,
}

pub fn segmentation_loss(batch: &SegBatch, weights: &[f64]) -> f64 {
    let mut loss = 0.0;
    for b in &batch.bands {
        assert_eq!(weights.len(), b.classes, "one weight per class");
        for (i, &y) in b.labels.iter().enumerate() {
            let p = b.probs[i * b.classes + y as usize].max(PROB_EPS);
            loss -= weights[y as usize] * p.ln();
        }
    }
    loss
}

/// Loss of one band computed from pre-softmax scores, plus the gradient
/// with respect to those scores. `logits` is pixel-major like
/// [`SegBandTerms::probs`].
pub fn band_loss_from_logits(labels: &[u8], logits: &[f64], classes: usize, weights: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), labels.len() * classes);
    assert_eq!(weights.len(), classes);
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, &y) in labels.iter().enumerate() {
        let z = &logits[i * classes..(i + 1) * classes];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let y = y as usize;
        let w = weights[y];
        let p_true = e[y] / s;
        loss -= w * p_true.max(PROB_EPS).ln();
        if p_true > PROB_EPS {
            for c in 0..classes {
                let p = e[c] / s;
                grad[i * classes + c] = w * (p - if c == y { 1.0 } else { 0.0 });
            }
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_term_hand_value() {
        let batch = SegBatch {
            bands: vec![SegBandTerms {
                classes: 3,
                labels: vec![0],
                probs: vec![0.5, 0.25, 0.25],
            }],
        };
        let l = segmentation_loss(&batch, &SOLAR_CLASS_WEIGHTS);
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_agreement_is_zero_and_weights_scale_linearly() {
        let batch = SegBatch {
            bands: vec![SegBandTerms {
                classes: 2,
                labels: vec![1, 0],
                probs: vec![0.0, 1.0, 1.0, 0.0],
            }],
        };
        assert_eq!(segmentation_loss(&batch, &[1.0, 1.0]), 0.0);
        let noisy = SegBatch {
            bands: vec![SegBandTerms {
                classes: 2,
                labels: vec![1, 0],
                probs: vec![0.3, 0.7, 0.6, 0.4],
            }],
        };
        let a = segmentation_loss(&noisy, &[1.0, 2.0]);
        let b = segmentation_loss(&noisy, &[3.0, 6.0]);
        assert!((b - 3.0 * a).abs() < 1e-12);
    }

    #[test]
    fn logits_form_matches_probability_form() {
        let logits = [0.2, -1.0, 0.7, 2.0, 0.0, -0.5];
        let labels = [2u8, 0];
        let (l, _) = band_loss_from_logits(&labels, &logits, 3, &SOLAR_CLASS_WEIGHTS);
        let mut probs = Vec::new();
        for px in logits.chunks(3) {
            let s: f64 = px.iter().map(|v| v.exp()).sum();
            probs.extend(px.iter().map(|v| v.exp() / s));
        }
        let batch = SegBatch {
            bands: vec![SegBandTerms {
                classes: 3,
                labels: labels.to_vec(),
                probs,
            }],
        };
        assert!((l - segmentation_loss(&batch, &SOLAR_CLASS_WEIGHTS)).abs() < 1e-12);
    }
}
