//! Multi-band two-stage detector.
//!
//! Per-band backbone branches (or one shared trunk over pixel-fused input)
//! produce a fused feature map. Every band owns an RPN and a detection head
//! that both read the fused map. Heads see their own band's proposals while
//! training and the union of all bands' proposals at test time.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::anchors::{assign_rpn_targets, decode_box, encode_box, generate_anchors, AnchorConfig, AnchorLabel};
use super::loss::band_loss_from_logits;
use super::nms::nms_indices;
use super::proposals::{combine_proposals, Proposal, ProposalMode};
use crate::data::{BandId, BoundingBox, MultiLayerSample};
use crate::error::{Error, Result};
use crate::fusion::{fuse_nodes, FusionOp, FusionSpec, FusionStage};
use crate::nn::layers::{self, add_conv, add_conv_small, add_linear, add_linear_small, roi_align_taps};
use crate::nn::{load_weights, save_weights, Graph, NodeId, ParamStore, Tensor};

/// Scaling applied to head regression targets.
const HEAD_TARGET_STD: [f32; 4] = [0.1, 0.1, 0.2, 0.2];
const ROI_SAMPLES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub bands: Vec<BandId>,
    pub fusion: FusionSpec,
    pub anchors: AnchorConfig,
    /// Channels of each backbone level; levels after the first start with
    /// 2x2 max pooling, so the stride is `2^(levels-1)`.
    pub backbone_channels: Vec<usize>,
    pub rpn_channels: usize,
    pub roi_bins: usize,
    pub head_hidden: usize,
    pub rpn_pos_iou: f32,
    pub rpn_neg_iou: f32,
    /// Anchors sampled per image for the objectness term.
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f32,
    pub rpn_pre_nms: usize,
    pub rpn_post_nms: usize,
    pub rpn_nms_iou: f32,
    pub head_batch: usize,
    pub head_pos_fraction: f32,
    pub head_pos_iou: f32,
    pub final_nms_iou: f32,
    pub score_threshold: f32,
    pub lambda: f64,
    pub head_lambda: f64,
    pub min_box_size: f32,
    pub class_id: u32,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            bands: Vec::new(),
            fusion: FusionSpec::default(),
            anchors: AnchorConfig::default(),
            backbone_channels: vec![16, 32, 64, 64, 64],
            rpn_channels: 64,
            roi_bins: 7,
            head_hidden: 256,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            rpn_pre_nms: 2000,
            rpn_post_nms: 300,
            rpn_nms_iou: 0.7,
            head_batch: 128,
            head_pos_fraction: 0.25,
            head_pos_iou: 0.5,
            final_nms_iou: 0.3,
            score_threshold: 0.5,
            lambda: super::loss::DEFAULT_LAMBDA,
            head_lambda: 1.0,
            min_box_size: 1.0,
            class_id: 1,
        }
    }
}

impl DetectConfig {
    /// Small network sized for 64x64 scenes on one CPU core.
    pub fn desk(bands: Vec<BandId>) -> Self {
        Self {
            bands,
            anchors: AnchorConfig {
                aspect_ratios: vec![(1.0, 1.0), (1.0, 2.0), (2.0, 1.0)],
                base_widths: vec![8.0, 16.0, 24.0],
                feature_stride: 4,
            },
            backbone_channels: vec![8, 16, 16],
            rpn_channels: 16,
            roi_bins: 4,
            head_hidden: 64,
            rpn_batch: 64,
            rpn_pre_nms: 200,
            rpn_post_nms: 32,
            head_batch: 32,
            ..Self::default()
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.backbone_channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands.is_empty() {
            return Err(Error::config("bands", "at least one band required"));
        }
        crate::data::validate_band_order(&self.bands)?;
        self.anchors.validate()?;
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::config("backbone.channels", "need at least one non-zero level"));
        }
        if self.anchors.feature_stride != self.stride() {
            return Err(Error::config(
                "anchors.stride",
                format!("must equal the backbone stride {}", self.stride()),
            ));
        }
        if !(0.0 <= self.rpn_neg_iou && self.rpn_neg_iou < self.rpn_pos_iou && self.rpn_pos_iou <= 1.0) {
            return Err(Error::config("rpn.iou", "need 0 <= neg < pos <= 1"));
        }
        if self.roi_bins == 0 || self.rpn_channels == 0 || self.head_hidden == 0 {
            return Err(Error::config("head", "sizes must be positive"));
        }
        if !(self.lambda >= 0.0 && self.head_lambda >= 0.0) {
            return Err(Error::config("lambda", "must be >= 0"));
        }
        Ok(())
    }

    fn fused_channels(&self) -> usize {
        let last = *self.backbone_channels.last().unwrap();
        match self.fusion.stage {
            FusionStage::Late => self.fusion.fused_channels(self.bands.len(), last),
            FusionStage::Early => last,
        }
    }

    fn input_channels(&self) -> usize {
        match (self.fusion.stage, self.fusion.op) {
            (FusionStage::Early, FusionOp::Concat) => self.bands.len(),
            _ => 1,
        }
    }
}

/// Loss components of one training or validation pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectLosses {
    pub rpn: f64,
    pub head: f64,
}

impl DetectLosses {
    pub fn total(&self) -> f64 {
        self.rpn + self.head
    }
}

/// Output for one band of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDetections {
    pub band: BandId,
    /// Proposals scored by this band's head.
    pub proposals: Vec<Proposal>,
    pub detections: Vec<BoundingBox>,
}

#[derive(Debug, Clone)]
pub struct DetectModel {
    pub config: DetectConfig,
    pub params: ParamStore,
}

struct Forward {
    fused: NodeId,
    feat_h: usize,
    feat_w: usize,
    rpn: Vec<(NodeId, NodeId)>,
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

impl DetectModel {
    pub fn new(config: DetectConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let ch = &config.backbone_channels;
        let branches: Vec<String> = match config.fusion.stage {
            FusionStage::Late => config.bands.iter().map(|b| b.name.clone()).collect(),
            FusionStage::Early => vec!["shared".into()],
        };
        for br in &branches {
            let mut cin = config.input_channels();
            for (i, &c) in ch.iter().enumerate() {
                add_conv(&mut ps, &format!("backbone.{br}.conv{i}"), cin, c, 3, &mut rng);
                cin = c;
            }
        }
        let fused = config.fused_channels();
        let a = config.anchors.per_location();
        let feat = fused * config.roi_bins * config.roi_bins;
        for b in &config.bands {
            let n = &b.name;
            add_conv(&mut ps, &format!("rpn.{n}.conv"), fused, config.rpn_channels, 3, &mut rng);
            add_conv_small(&mut ps, &format!("rpn.{n}.cls"), config.rpn_channels, a, 1, 0.01, &mut rng);
            add_conv_small(&mut ps, &format!("rpn.{n}.reg"), config.rpn_channels, 4 * a, 1, 0.01, &mut rng);
            add_linear(&mut ps, &format!("head.{n}.fc"), feat, config.head_hidden, &mut rng);
            add_linear_small(&mut ps, &format!("head.{n}.cls"), config.head_hidden, 1, 0.01, &mut rng);
            add_linear_small(&mut ps, &format!("head.{n}.reg"), config.head_hidden, 4, 0.001, &mut rng);
        }
        Ok(Self { config, params: ps })
    }

    /// Writes `config.json` and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.json");
        let text = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        save_weights(&dir.join("weights.bin"), &self.params.snapshot(|_| true))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("config.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let config: DetectConfig = serde_json::from_str(&text).map_err(|e| Error::Json { path: p, source: e })?;
        let mut model = Self::new(config, 0)?;
        model.params.load_snapshot(&load_weights(&dir.join("weights.bin"))?)?;
        Ok(model)
    }

    fn check_bands(&self, s: &MultiLayerSample) -> Result<()> {
        let want: Vec<&str> = self.config.bands.iter().map(|b| b.name.as_str()).collect();
        for name in &want {
            if s.band(name).is_none() {
                return Err(Error::BandMismatch {
                    sample_id: s.sample_id.clone(),
                    band: name.to_string(),
                    problem: "is required by the model but missing".into(),
                });
            }
        }
        Ok(())
    }

    /// `[N, 1, H, W]` input for one band.
    fn band_input(&self, samples: &[&MultiLayerSample], band: &str) -> Tensor {
        let (h, w) = (samples[0].height(), samples[0].width());
        let mut data = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            data.extend_from_slice(&s.band(band).expect("checked band").image.data);
        }
        Tensor::from_vec(&[samples.len(), 1, h, w], data)
    }

    fn forward(&self, g: &mut Graph, samples: &[&MultiLayerSample]) -> Result<Forward> {
        for s in samples {
            self.check_bands(s)?;
            if (s.height(), s.width()) != (samples[0].height(), samples[0].width()) {
                return Err(Error::Shape("all samples in a batch must share one size".into()));
            }
        }
        let cfg = &self.config;
        let levels = cfg.backbone_channels.len();
        let branch = |g: &mut Graph, x: NodeId, name: &str| {
            let mut h = x;
            for i in 0..levels {
                if i > 0 {
                    h = g.max_pool2(h);
                }
                h = layers::conv_relu(g, h, &format!("backbone.{name}.conv{i}"));
            }
            h
        };
        let fused = match cfg.fusion.stage {
            FusionStage::Late => {
                let mut outs = Vec::new();
                for b in &cfg.bands {
                    let x = g.input(self.band_input(samples, &b.name));
                    outs.push(branch(g, x, &b.name));
                }
                fuse_nodes(g, &outs, cfg.fusion.op)?
            }
            FusionStage::Early => {
                let xs: Vec<NodeId> = cfg
                    .bands
                    .iter()
                    .map(|b| g.input(self.band_input(samples, &b.name)))
                    .collect();
                let x = fuse_nodes(g, &xs, cfg.fusion.op)?;
                branch(g, x, "shared")
            }
        };
        let (_, _, feat_h, feat_w) = g.value(fused).dims4();
        let mut rpn = Vec::new();
        for b in &cfg.bands {
            let n = &b.name;
            let h = layers::conv_relu(g, fused, &format!("rpn.{n}.conv"));
            let cls = layers::conv(g, h, &format!("rpn.{n}.cls"));
            let reg = layers::conv(g, h, &format!("rpn.{n}.reg"));
            rpn.push((cls, reg));
        }
        Ok(Forward {
            fused,
            feat_h,
            feat_w,
            rpn,
        })
    }

    /// Objectness logit and offsets of anchor `a` (grid-major order) for
    /// image `n`.
    fn anchor_outputs(&self, g: &Graph, f: &Forward, band: usize, n: usize, a: usize) -> (f32, [f32; 4]) {
        let na = self.config.anchors.per_location();
        let hw = f.feat_h * f.feat_w;
        let (loc, k) = (a / na, a % na);
        let cls = &g.value(f.rpn[band].0).data;
        let reg = &g.value(f.rpn[band].1).data;
        let logit = cls[(n * na + k) * hw + loc];
        let mut t = [0f32; 4];
        for (j, tj) in t.iter_mut().enumerate() {
            *tj = reg[(n * 4 * na + 4 * k + j) * hw + loc];
        }
        (logit, t)
    }

    fn band_proposals(
        &self,
        g: &Graph,
        f: &Forward,
        anchors: &[BoundingBox],
        band: usize,
        n: usize,
        img: (usize, usize),
    ) -> Vec<Proposal> {
        let cfg = &self.config;
        let mut boxes = Vec::with_capacity(anchors.len());
        let mut scores = Vec::with_capacity(anchors.len());
        for (i, a) in anchors.iter().enumerate() {
            let (logit, t) = self.anchor_outputs(g, f, band, n, i);
            let b = decode_box(a, t).clamped(img.1, img.0);
            if b.w >= cfg.min_box_size && b.h >= cfg.min_box_size {
                boxes.push(b);
                scores.push(sigmoid(logit));
            }
        }
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(cfg.rpn_pre_nms);
        let top_boxes: Vec<BoundingBox> = order.iter().map(|&i| boxes[i]).collect();
        let top_scores: Vec<f32> = order.iter().map(|&i| scores[i]).collect();
        let mut keep = nms_indices(&top_boxes, &top_scores, cfg.rpn_nms_iou);
        keep.truncate(cfg.rpn_post_nms);
        keep.into_iter()
            .map(|i| Proposal {
                bbox: top_boxes[i].with_score(top_scores[i]),
                objectness: top_scores[i],
                source_band: cfg.bands[band].clone(),
            })
            .collect()
    }

    /// One band's head over pooled RoI features. Returns (cls logits
    /// `[R, 1]`, offsets `[R, 4]`).
    fn head(&self, g: &mut Graph, band: usize, pooled: NodeId) -> (NodeId, NodeId) {
        let n = &self.config.bands[band].name;
        let h = layers::linear(g, pooled, &format!("head.{n}.fc"));
        let h = g.relu(h);
        let cls = layers::linear(g, h, &format!("head.{n}.cls"));
        let reg = layers::linear(g, h, &format!("head.{n}.reg"));
        (cls, reg)
    }

    /// RoIAlign of `(image index, box)` regions from the fused map.
    fn pool(&self, g: &mut Graph, f: &Forward, rois: &[(usize, BoundingBox)]) -> NodeId {
        let bins = self.config.roi_bins;
        let stride = self.config.stride() as f32;
        let mut taps = Vec::with_capacity(rois.len() * bins * bins);
        for (_, b) in rois {
            taps.extend(roi_align_taps((b.x, b.y, b.w, b.h), stride, f.feat_h, f.feat_w, bins, ROI_SAMPLES));
        }
        g.roi_align(f.fused, rois.iter().map(|r| r.0).collect(), taps, bins)
    }

    /// Records the full training objective on `g`. The returned node is
    /// the scalar loss summed over bands, RPN and head terms.
    pub fn training_loss(
        &self,
        g: &mut Graph,
        samples: &[&MultiLayerSample],
        rng: &mut impl Rng,
    ) -> Result<(NodeId, DetectLosses)> {
        let cfg = &self.config;
        let f = self.forward(g, samples)?;
        let img = (samples[0].height(), samples[0].width());
        let anchors = generate_anchors(&cfg.anchors, f.feat_h, f.feat_w);
        let na = anchors.len();
        let mut terms = Vec::new();
        let mut losses = DetectLosses::default();
        for (bi, band) in cfg.bands.iter().enumerate() {
            // RPN: each band against its own ground truth.
            let mut labels = Vec::new();
            let mut logits = Vec::new();
            let mut offsets = Vec::new();
            let mut targets = Vec::new();
            let mut index = Vec::new();
            for (n, s) in samples.iter().enumerate() {
                let gt = &s.band(&band.name).expect("checked band").boxes;
                let assigned = assign_rpn_targets(&anchors, gt, cfg.rpn_pos_iou, cfg.rpn_neg_iou);
                let mut pos: Vec<usize> = (0..na).filter(|&i| assigned[i].label == AnchorLabel::Positive).collect();
                let mut neg: Vec<usize> = (0..na).filter(|&i| assigned[i].label == AnchorLabel::Negative).collect();
                pos.shuffle(rng);
                neg.shuffle(rng);
                pos.truncate((cfg.rpn_batch as f32 * cfg.rpn_pos_fraction).round() as usize);
                neg.truncate(cfg.rpn_batch.saturating_sub(pos.len()));
                for (i, label) in pos.iter().map(|&i| (i, AnchorLabel::Positive)).chain(neg.iter().map(|&i| (i, AnchorLabel::Negative))) {
                    let (z, t) = self.anchor_outputs(g, &f, bi, n, i);
                    labels.push(label);
                    logits.push(z as f64);
                    offsets.push(t.map(f64::from));
                    targets.push(assigned[i].offsets.map(|o| o.map(f64::from)));
                    index.push((n, i));
                }
            }
            let (value, gl, go) = band_loss_from_logits(
                &labels,
                &logits,
                &offsets,
                &targets,
                labels.len() as f64,
                (na * samples.len()) as f64,
                cfg.lambda,
            );
            let (cls_node, reg_node) = f.rpn[bi];
            let mut gcls = Tensor::zeros(&g.value(cls_node).shape);
            let mut greg = Tensor::zeros(&g.value(reg_node).shape);
            let a_per = cfg.anchors.per_location();
            let hw = f.feat_h * f.feat_w;
            for (j, &(n, i)) in index.iter().enumerate() {
                let (loc, k) = (i / a_per, i % a_per);
                gcls.data[(n * a_per + k) * hw + loc] = gl[j] as f32;
                for c in 0..4 {
                    greg.data[(n * 4 * a_per + 4 * k + c) * hw + loc] = go[j][c] as f32;
                }
            }
            losses.rpn += value;
            terms.push(g.loss(value as f32, vec![(cls_node, gcls), (reg_node, greg)]));

            // Head: own-band proposals plus the band's ground truth.
            let mut rois = Vec::new();
            let mut labels = Vec::new();
            let mut targets = Vec::new();
            for (n, s) in samples.iter().enumerate() {
                let gt = &s.band(&band.name).expect("checked band").boxes;
                let mut cands: Vec<BoundingBox> = self
                    .band_proposals(g, &f, &anchors, bi, n, img)
                    .into_iter()
                    .map(|p| p.bbox)
                    .collect();
                cands.extend(gt.iter().copied());
                let mut pos = Vec::new();
                let mut neg = Vec::new();
                for c in cands {
                    let best = gt
                        .iter()
                        .map(|g| (c.iou(g), g))
                        .max_by(|a, b| a.0.total_cmp(&b.0));
                    match best {
                        Some((iou, g)) if iou >= cfg.head_pos_iou => {
                            let t = encode_box(&c, g);
                            pos.push((c, Some(std::array::from_fn(|k| (t[k] / HEAD_TARGET_STD[k]) as f64))));
                        }
                        _ => neg.push((c, None)),
                    }
                }
                pos.shuffle(rng);
                neg.shuffle(rng);
                pos.truncate((cfg.head_batch as f32 * cfg.head_pos_fraction).round().max(1.0) as usize);
                neg.truncate(cfg.head_batch.saturating_sub(pos.len()));
                for (c, t) in pos {
                    rois.push((n, c));
                    labels.push(AnchorLabel::Positive);
                    targets.push(t);
                }
                for (c, t) in neg {
                    rois.push((n, c));
                    labels.push(AnchorLabel::Negative);
                    targets.push(t);
                }
            }
            if rois.is_empty() {
                continue;
            }
            let pooled = self.pool(g, &f, &rois);
            let (cls, reg) = self.head(g, bi, pooled);
            let logits: Vec<f64> = g.value(cls).data.iter().map(|&v| v as f64).collect();
            let offs: Vec<[f64; 4]> = g
                .value(reg)
                .data
                .chunks(4)
                .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64])
                .collect();
            let r = rois.len() as f64;
            let (value, gl, go) = band_loss_from_logits(&labels, &logits, &offs, &targets, r, r, cfg.head_lambda);
            let gcls = Tensor::from_vec(&[rois.len(), 1], gl.iter().map(|&v| v as f32).collect());
            let greg = Tensor::from_vec(&[rois.len(), 4], go.iter().flatten().map(|&v| v as f32).collect());
            losses.head += value;
            terms.push(g.loss(value as f32, vec![(cls, gcls), (reg, greg)]));
        }
        Ok((g.sum_scalars(&terms), losses))
    }

    /// Detections for a batch of samples, `[sample][band]`.
    pub fn detect_batch(&self, samples: &[&MultiLayerSample], mode: ProposalMode) -> Result<Vec<Vec<BandDetections>>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let cfg = &self.config;
        let mut g = Graph::inference(&self.params);
        let f = self.forward(&mut g, samples)?;
        let img = (samples[0].height(), samples[0].width());
        let anchors = generate_anchors(&cfg.anchors, f.feat_h, f.feat_w);
        let mut out = Vec::with_capacity(samples.len());
        for n in 0..samples.len() {
            let own: Vec<Vec<Proposal>> = (0..cfg.bands.len())
                .map(|bi| self.band_proposals(&g, &f, &anchors, bi, n, img))
                .collect();
            let per_head = combine_proposals(&own, mode);
            let mut bands = Vec::with_capacity(cfg.bands.len());
            for (bi, props) in per_head.into_iter().enumerate() {
                let mut dets = Vec::new();
                if !props.is_empty() {
                    let rois: Vec<(usize, BoundingBox)> = props.iter().map(|p| (n, p.bbox)).collect();
                    let pooled = self.pool(&mut g, &f, &rois);
                    let (cls, reg) = self.head(&mut g, bi, pooled);
                    let logits = g.value(cls).data.clone();
                    let offs = g.value(reg).data.clone();
                    let mut boxes = Vec::new();
                    let mut scores = Vec::new();
                    for (i, p) in props.iter().enumerate() {
                        let s = sigmoid(logits[i]);
                        if s < cfg.score_threshold {
                            continue;
                        }
                        let t = std::array::from_fn(|k| offs[4 * i + k] * HEAD_TARGET_STD[k]);
                        let b = decode_box(&p.bbox, t).clamped(img.1, img.0);
                        if b.w >= cfg.min_box_size && b.h >= cfg.min_box_size {
                            boxes.push(BoundingBox { class_id: cfg.class_id, ..b }.with_score(s));
                            scores.push(s);
                        }
                    }
                    dets = nms_indices(&boxes, &scores, cfg.final_nms_iou)
                        .into_iter()
                        .map(|i| boxes[i])
                        .collect();
                }
                bands.push(BandDetections {
                    band: cfg.bands[bi].clone(),
                    proposals: props,
                    detections: dets,
                });
            }
            out.push(bands);
        }
        Ok(out)
    }
}

/// Band-specific detections for one sample.
pub fn detect_forward(sample: &MultiLayerSample, model: &DetectModel, mode: ProposalMode) -> Result<Vec<BandDetections>> {
    Ok(model.detect_batch(&[sample], mode)?.pop().expect("one sample in, one out"))
}
