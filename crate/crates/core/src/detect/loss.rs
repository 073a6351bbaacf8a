//! Two-term detection objective: object/non-object cross-entropy over the
//! sampled anchors plus smooth-L1 box regression over positives, summed over
//! bands.

use super::AnchorLabel;

pub const DEFAULT_LAMBDA: f64 = 10.0;

const PROB_EPS: f64 = 1e-12;

/// One band's anchors. `probs`, `offsets` and `targets` are indexed like
/// `labels`; `targets[i]` is set exactly when `labels[i]` is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct BandTerms {
    pub labels: Vec<AnchorLabel>,
    pub probs: Vec<f64>,
    pub offsets: Vec<[f64; 4]>,
    pub targets: Vec<Option<[f64; 4]>>,
    pub n_cls: f64,
    pub n_reg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionBatch {
    pub bands: Vec<BandTerms>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandGrad {
    pub probs: Vec<f64>,
    pub offsets: Vec<[f64; 4]>,
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

fn target_of(label: AnchorLabel) -> Option<f64> {
    match label {
        AnchorLabel::Positive => Some(1.0),
        AnchorLabel::Negative => Some(0.0),
        AnchorLabel::Ignore => None,
    }
}

/// Classification and regression sums of one band, before normalisation.
fn band_sums(t: &BandTerms) -> (f64, f64) {
    let mut cls = 0.0;
    let mut reg = 0.0;
    for i in 0..t.labels.len() {
        if let Some(y) = target_of(t.labels[i]) {
            let p = t.probs[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
            cls -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        if t.labels[i] == AnchorLabel::Positive {
            let tt = t.targets[i].expect("positive anchor without target");
            reg += (0..4).map(|k| smooth_l1(t.offsets[i][k] - tt[k])).sum::<f64>();
        }
    }
    (cls, reg)
}

/// Regression part `Σ_b (1/N_reg) Σ_i p* L_reg` without the `λ` factor.
pub fn regression_sum(batch: &DetectionBatch) -> f64 {
    batch
        .bands
        .iter()
        .map(|t| band_sums(t).1 / t.n_reg.max(1.0))
        .sum()
}

pub fn detection_loss(batch: &DetectionBatch) -> f64 {
    batch
        .bands
        .iter()
        .map(|t| {
            let (cls, reg) = band_sums(t);
            cls / t.n_cls.max(1.0) + batch.lambda * reg / t.n_reg.max(1.0)
        })
        .sum()
}

/// Loss and its gradient with respect to every `probs` and `offsets` entry.
pub fn detection_loss_grad(batch: &DetectionBatch) -> (f64, Vec<BandGrad>) {
    let grads = batch
        .bands
        .iter()
        .map(|t| {
            let n = t.labels.len();
            let (nc, nr) = (t.n_cls.max(1.0), t.n_reg.max(1.0));
            let mut g = BandGrad {
                probs: vec![0.0; n],
                offsets: vec![[0.0; 4]; n],
            };
            for i in 0..n {
                if let Some(y) = target_of(t.labels[i]) {
                    let p = t.probs[i];
                    if p > PROB_EPS && p < 1.0 - PROB_EPS {
                        g.probs[i] = (-y / p + (1.0 - y) / (1.0 - p)) / nc;
                    }
                }
                if t.labels[i] == AnchorLabel::Positive {
                    let tt = t.targets[i].expect("positive anchor without target");
                    for k in 0..4 {
                        g.offsets[i][k] = batch.lambda * smooth_l1_grad(t.offsets[i][k] - tt[k]) / nr;
                    }
                }
            }
            g
        })
        .collect();
    (detection_loss(batch), grads)
}

/// The same objective for one band with objectness given as logits, as the
/// networks produce it. Returns the band's loss, the gradient per logit and
/// the gradient per offset.
pub fn band_loss_from_logits(
    labels: &[AnchorLabel],
    logits: &[f64],
    offsets: &[[f64; 4]],
    targets: &[Option<[f64; 4]>],
    n_cls: f64,
    n_reg: f64,
    lambda: f64,
) -> (f64, Vec<f64>, Vec<[f64; 4]>) {
    let (nc, nr) = (n_cls.max(1.0), n_reg.max(1.0));
    let mut loss = 0.0;
    let mut gl = vec![0.0; labels.len()];
    let mut go = vec![[0.0; 4]; labels.len()];
    for i in 0..labels.len() {
        if let Some(y) = target_of(labels[i]) {
            let z = logits[i];
            // -[y ln σ(z) + (1-y) ln(1-σ(z))] = softplus(z) - y z
            let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
            loss += (softplus - y * z) / nc;
            gl[i] = (1.0 / (1.0 + (-z).exp()) - y) / nc;
        }
        if labels[i] == AnchorLabel::Positive {
            let tt = targets[i].expect("positive anchor without target");
            for k in 0..4 {
                let d = offsets[i][k] - tt[k];
                loss += lambda * smooth_l1(d) / nr;
                go[i][k] = lambda * smooth_l1_grad(d) / nr;
            }
        }
    }
    (loss, gl, go)
}
