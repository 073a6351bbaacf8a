//! Multi-band U-Net.
//!
//! Every band has its own contracting path and its own expansive path. With
//! late fusion the per-band bottlenecks are fused and every decoder starts
//! from the fused bottleneck. With early fusion only the first block is
//! per band; its outputs are fused and a shared trunk produces the deeper
//! levels. Each decoder always receives its own band's first-level skip.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::band_loss_from_logits;
use crate::data::BandId;
use crate::error::{Error, Result};
use crate::fusion::{fuse_nodes, FusionSpec, FusionStage};
use crate::nn::layers::{self, add_conv};
use crate::nn::{load_weights, save_weights, Graph, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub bands: Vec<BandId>,
    /// Number of pooling stages.
    pub depth: usize,
    pub base_channels: usize,
    pub fusion: FusionSpec,
    pub class_set: Vec<String>,
    pub class_weights: Vec<f64>,
    /// Side of the square patches fed to the network.
    pub patch_size: usize,
    pub background_class: u8,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            bands: Vec::new(),
            depth: 4,
            base_channels: 16,
            fusion: FusionSpec::default(),
            class_set: vec!["background".into(), "foreground".into()],
            class_weights: vec![1.0, 1.0],
            patch_size: 224,
            background_class: 0,
        }
    }
}

impl SegConfig {
    /// Small network sized for 64x64 scenes on one CPU core.
    pub fn desk(bands: Vec<BandId>, class_set: Vec<String>) -> Self {
        let k = class_set.len();
        Self {
            bands,
            depth: 2,
            base_channels: 8,
            class_set,
            class_weights: vec![1.0; k],
            patch_size: 32,
            ..Self::default()
        }
    }

    pub fn classes(&self) -> usize {
        self.class_set.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channels entering every decoder.
    pub fn bottleneck_channels(&self) -> usize {
        let c = self.channels(self.depth);
        match self.fusion.stage {
            FusionStage::Late => self.fusion.fused_channels(self.bands.len(), c),
            FusionStage::Early => c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands.is_empty() {
            return Err(Error::config("bands", "at least one band required"));
        }
        crate::data::validate_band_order(&self.bands)?;
        if self.class_set.len() < 2 || self.class_set.len() > 255 {
            return Err(Error::config("classes", "need between 2 and 255 classes"));
        }
        if self.class_weights.len() != self.class_set.len() {
            return Err(Error::config("class_weights", "need one weight per class"));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::config("class_weights", "weights must be positive"));
        }
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::config("depth", "depth and base width must be positive"));
        }
        if self.patch_size == 0 || self.patch_size % (1 << self.depth) != 0 {
            return Err(Error::config(
                "patch_size",
                format!("must be a positive multiple of {}", 1 << self.depth),
            ));
        }
        if self.background_class as usize >= self.class_set.len() {
            return Err(Error::config("background_class", "not a class index"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: SegConfig,
    pub params: ParamStore,
}

/// Per-band label grids for a batch of patches: `labels[band]` holds
/// `N * H * W` class indices, image-major.
pub type PatchLabels = Vec<Vec<u8>>;

impl SegModel {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let d = config.depth;
        let names: Vec<String> = config.bands.iter().map(|b| b.name.clone()).collect();
        let block = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cin: usize, c: usize| {
            add_conv(ps, &format!("{prefix}.a"), cin, c, 3, rng);
            add_conv(ps, &format!("{prefix}.b"), c, c, 3, rng);
        };
        for n in &names {
            block(&mut ps, &mut rng, &format!("enc.{n}.l0"), 1, config.channels(0));
        }
        let (owners, first_in): (Vec<String>, usize) = match config.fusion.stage {
            FusionStage::Late => (names.clone(), config.channels(0)),
            FusionStage::Early => (
                vec!["shared".into()],
                config.fusion.fused_channels(names.len(), config.channels(0)),
            ),
        };
        for o in &owners {
            let mut cin = first_in;
            for l in 1..=d {
                block(&mut ps, &mut rng, &format!("enc.{o}.l{l}"), cin, config.channels(l));
                cin = config.channels(l);
            }
        }
        for n in &names {
            let mut cin = config.bottleneck_channels();
            for l in (0..d).rev() {
                let c = config.channels(l);
                add_conv(&mut ps, &format!("dec.{n}.l{l}.up"), cin, c, 3, &mut rng);
                block(&mut ps, &mut rng, &format!("dec.{n}.l{l}"), 2 * c, c);
                cin = c;
            }
            add_conv(&mut ps, &format!("dec.{n}.out"), config.channels(0), config.classes(), 1, &mut rng);
        }
        Ok(Self { config, params: ps })
    }

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
        let config: SegConfig = serde_json::from_str(&text).map_err(|e| Error::Json { path: p, source: e })?;
        let mut model = Self::new(config, 0)?;
        model.params.load_snapshot(&load_weights(&dir.join("weights.bin"))?)?;
        Ok(model)
    }

    /// Records the network on `g`. `inputs[b]` is band `b`'s `[N, 1, P, P]`
    /// patch batch. Returns one logit node `[N, classes, P, P]` per band.
    pub fn logits(&self, g: &mut Graph, inputs: &[Tensor]) -> Result<Vec<NodeId>> {
        let cfg = &self.config;
        if inputs.len() != cfg.bands.len() {
            return Err(Error::Shape(format!(
                "model has {} bands, got {} inputs",
                cfg.bands.len(),
                inputs.len()
            )));
        }
        for t in inputs {
            let (_, c, h, w) = t.dims4();
            if c != 1 || h % (1 << cfg.depth) != 0 || w % (1 << cfg.depth) != 0 || t.shape != inputs[0].shape {
                return Err(Error::Shape(format!("bad patch batch shape {:?}", t.shape)));
            }
        }
        let d = cfg.depth;
        let block = |g: &mut Graph, x: NodeId, prefix: &str| {
            let h = layers::conv_relu(g, x, &format!("{prefix}.a"));
            layers::conv_relu(g, h, &format!("{prefix}.b"))
        };
        let names: Vec<&str> = cfg.bands.iter().map(|b| b.name.as_str()).collect();
        let first: Vec<NodeId> = names
            .iter()
            .zip(inputs)
            .map(|(n, t)| {
                let x = g.input(t.clone());
                block(g, x, &format!("enc.{n}.l0"))
            })
            .collect();
        // skips[b][l] for l < depth; bottleneck input for decoders.
        let (skips, bottleneck): (Vec<Vec<NodeId>>, NodeId) = match cfg.fusion.stage {
            FusionStage::Late => {
                let mut skips = Vec::new();
                let mut bots = Vec::new();
                for (bi, n) in names.iter().enumerate() {
                    let mut levels = vec![first[bi]];
                    let mut h = first[bi];
                    for l in 1..=d {
                        let p = g.max_pool2(h);
                        h = block(g, p, &format!("enc.{n}.l{l}"));
                        if l < d {
                            levels.push(h);
                        }
                    }
                    skips.push(levels);
                    bots.push(h);
                }
                let fused = fuse_nodes(g, &bots, cfg.fusion.op)?;
                (skips, fused)
            }
            FusionStage::Early => {
                let mut h = fuse_nodes(g, &first, cfg.fusion.op)?;
                let mut shared = Vec::new();
                for l in 1..=d {
                    let p = g.max_pool2(h);
                    h = block(g, p, &format!("enc.shared.l{l}"));
                    if l < d {
                        shared.push(h);
                    }
                }
                let skips = first
                    .iter()
                    .map(|&f0| std::iter::once(f0).chain(shared.iter().copied()).collect())
                    .collect();
                (skips, h)
            }
        };
        let mut outs = Vec::with_capacity(names.len());
        for (bi, n) in names.iter().enumerate() {
            let mut h = bottleneck;
            for l in (0..d).rev() {
                let u = g.upsample2(h);
                let u = layers::conv_relu(g, u, &format!("dec.{n}.l{l}.up"));
                let cat = g.concat_channels(&[skips[bi][l], u]);
                h = block(g, cat, &format!("dec.{n}.l{l}"));
            }
            outs.push(layers::conv(g, h, &format!("dec.{n}.out")));
        }
        Ok(outs)
    }

    /// Per-band class probabilities `[N, classes, P, P]`.
    pub fn seg_forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut g = Graph::inference(&self.params);
        let outs = self.logits(&mut g, inputs)?;
        Ok(outs.iter().map(|&o| g.value(o).softmax_channels()).collect())
    }

    /// Per-band argmax labels, `N * P * P` each.
    pub fn predict_labels(&self, inputs: &[Tensor]) -> Result<Vec<Vec<u8>>> {
        let mut g = Graph::inference(&self.params);
        let outs = self.logits(&mut g, inputs)?;
        Ok(outs.iter().map(|&o| argmax_batch(g.value(o))).collect())
    }

    /// Records the weighted cross-entropy against `labels` and returns the
    /// root node with its value.
    pub fn training_loss(&self, g: &mut Graph, inputs: &[Tensor], labels: &PatchLabels) -> Result<(NodeId, f64)> {
        let outs = self.logits(g, inputs)?;
        let k = self.config.classes();
        let mut terms = Vec::with_capacity(outs.len());
        let mut total = 0.0;
        for (bi, &o) in outs.iter().enumerate() {
            let t = g.value(o);
            let (n, _, h, w) = t.dims4();
            let hw = h * w;
            if labels[bi].len() != n * hw {
                return Err(Error::Shape(format!("band {bi}: expected {} labels", n * hw)));
            }
            // Channel-major to pixel-major.
            let mut z = vec![0f64; n * hw * k];
            for i in 0..n {
                for c in 0..k {
                    for p in 0..hw {
                        z[(i * hw + p) * k + c] = t.data[(i * k + c) * hw + p] as f64;
                    }
                }
            }
            let (loss, gz) = band_loss_from_logits(&labels[bi], &z, k, &self.config.class_weights);
            let mut grad = Tensor::zeros(&t.shape);
            for i in 0..n {
                for c in 0..k {
                    for p in 0..hw {
                        grad.data[(i * k + c) * hw + p] = gz[(i * hw + p) * k + c] as f32;
                    }
                }
            }
            total += loss;
            terms.push(g.loss(loss as f32, vec![(o, grad)]));
        }
        Ok((g.sum_scalars(&terms), total))
    }
}

/// Argmax over channels for every item of an `[N, C, H, W]` tensor.
pub fn argmax_batch(t: &Tensor) -> Vec<u8> {
    let (n, _, _, _) = t.dims4();
    (0..n).flat_map(|i| t.batch_item(i).argmax_channels()).collect()
}
