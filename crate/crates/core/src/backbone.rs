//! ESNet backbone and a plain ShuffleNetV2 baseline.
//!
//! Both share a 3x3 stride-2 stem with max pooling followed by stages that
//! each start with a stride-2 block. Block widths of ESNet are controlled by
//! per-block ratios: the prunable inner convolutions of block `i` use
//! `round_to_8(ratio_i * stage_channels)` channels while block outputs stay
//! fixed. Layers are allocated for the capacity ratios given at build time
//! and any smaller ratio uses a leading slice of the same weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, NodeId};
use crate::layers::{round_to_8, Builder, ConvBn, GhostModule, SeModule};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    Esnet,
    ShufflenetV2,
}

/// Channel ratios per block, picked for the small detector.
pub const PICODET_S_RATIOS: [f64; 13] = [0.875, 0.5, 0.5, 0.5, 0.625, 0.5, 0.625, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];

/// Channel ratios per block of the full-width classification network.
pub const ESNET_1X_RATIOS: [f64; 13] = [0.875, 0.5, 1.0, 0.625, 0.5, 0.75, 0.625, 0.625, 0.5, 0.625, 1.0, 0.625, 0.75];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub stage_base_channels: Vec<usize>,
    pub stage_block_counts: Vec<usize>,
    pub width_multiplier: f64,
    /// One ratio per block; `None` means every block at 1.0.
    pub block_ratios: Option<Vec<f64>>,
    pub stem_channels: usize,
    pub activation: Activation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Esnet,
            stage_base_channels: vec![128, 256, 512],
            stage_block_counts: vec![3, 7, 3],
            width_multiplier: 0.75,
            block_ratios: Some(PICODET_S_RATIOS.to_vec()),
            stem_channels: 24,
            activation: Activation::Hswish,
        }
    }
}

impl BackboneConfig {
    /// Full-width ESNet used for image classification.
    pub fn esnet_1x() -> Self {
        BackboneConfig { width_multiplier: 1.0, block_ratios: Some(ESNET_1X_RATIOS.to_vec()), ..Default::default() }
    }

    pub fn num_blocks(&self) -> usize {
        self.stage_block_counts.iter().sum()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stage_base_channels.iter().map(|&c| round_to_8(c as f64 * self.width_multiplier)).collect()
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.block_ratios.clone().unwrap_or_else(|| vec![1.0; self.num_blocks()])
    }

    /// Stage index of every block.
    pub fn block_stages(&self) -> Vec<usize> {
        self.stage_block_counts.iter().enumerate().flat_map(|(s, &n)| std::iter::repeat_n(s, n)).collect()
    }

    /// Inner channel count of every block for the given ratios.
    pub fn mid_channels(&self, ratios: &[f64]) -> Vec<usize> {
        let stages = self.stage_channels();
        self.block_stages().iter().zip(ratios).map(|(&s, &r)| round_to_8(r * stages[s] as f64)).collect()
    }

    /// Number of stages whose outputs feed the neck (the last three).
    pub fn num_outputs(&self) -> usize {
        self.stage_block_counts.len().min(3)
    }

    pub fn output_channels(&self) -> Vec<usize> {
        let stages = self.stage_channels();
        stages[stages.len() - self.num_outputs()..].to_vec()
    }

    pub fn output_strides(&self) -> Vec<f64> {
        let n = self.stage_block_counts.len();
        (n - self.num_outputs()..n).map(|s| (8usize << s) as f64).collect()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.stage_base_channels.is_empty() {
            return Err("stage_base_channels must not be empty".into());
        }
        if self.stage_base_channels.len() != self.stage_block_counts.len() {
            return Err(format!(
                "stage_base_channels has {} entries but stage_block_counts has {}",
                self.stage_base_channels.len(),
                self.stage_block_counts.len()
            ));
        }
        if self.stage_block_counts.contains(&0) {
            return Err("every stage needs at least one block".into());
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(format!("width_multiplier must be positive, got {}", self.width_multiplier));
        }
        if self.stem_channels == 0 {
            return Err("stem_channels must be positive".into());
        }
        if let Some(r) = &self.block_ratios {
            if r.len() != self.num_blocks() {
                return Err(format!("block_ratios has {} entries but the backbone has {} blocks", r.len(), self.num_blocks()));
            }
            if let Some(bad) = r.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
                return Err(format!("block ratio {bad} outside (0, 1]"));
            }
        }
        Ok(())
    }
}

/// Stride-1 block: split, Ghost + SE + 1x1 on one half, concat, shuffle.
#[derive(Debug, Clone, Copy)]
pub struct EsBlock {
    pub ghost: GhostModule,
    pub se: SeModule,
    pub linear: ConvBn,
    pub channels: usize,
}

impl EsBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize, mid: usize, act: Activation) -> Self {
        EsBlock {
            ghost: GhostModule::new(b, &format!("{name}.ghost"), channels / 2, mid, act),
            se: SeModule::new(b, &format!("{name}.se"), mid),
            linear: b.conv_bn(&format!("{name}.linear"), mid, channels / 2, 1, 1, act),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, mid: usize) -> NodeId {
        let half = self.channels / 2;
        let x1 = g.slice_channels(x, 0, half);
        let x2 = g.slice_channels(x, half, half);
        let t = self.ghost.forward(g, x2, mid);
        let t = self.se.forward(g, t);
        let t = self.linear.forward(g, t, half);
        let y = g.concat(&[x1, t]);
        g.channel_shuffle(y, 2)
    }
}

/// Stride-2 block: two downsampling branches, concat, shuffle, then a
/// depthwise 3x3 + pointwise 1x1 fusion.
#[derive(Debug, Clone, Copy)]
pub struct EsDownBlock {
    pub branch1_dw: ConvBn,
    pub branch1_pw: ConvBn,
    pub branch2_pw: ConvBn,
    pub branch2_dw: ConvBn,
    pub se: SeModule,
    pub branch2_linear: ConvBn,
    pub fuse_dw: ConvBn,
    pub fuse_pw: ConvBn,
    pub out_channels: usize,
}

impl EsDownBlock {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, mid: usize, act: Activation) -> Self {
        let id = Activation::Identity;
        EsDownBlock {
            branch1_dw: b.dw_bn(&format!("{name}.branch1.dw"), cin, 3, 2, id),
            branch1_pw: b.conv_bn(&format!("{name}.branch1.pw"), cin, cout / 2, 1, 1, act),
            branch2_pw: b.conv_bn(&format!("{name}.branch2.pw"), cin, mid / 2, 1, 1, act),
            branch2_dw: b.dw_bn(&format!("{name}.branch2.dw"), mid / 2, 3, 2, id),
            se: SeModule::new(b, &format!("{name}.branch2.se"), mid / 2),
            branch2_linear: b.conv_bn(&format!("{name}.branch2.linear"), mid / 2, cout / 2, 1, 1, act),
            fuse_dw: b.dw_bn(&format!("{name}.fuse.dw"), cout, 3, 1, act),
            fuse_pw: b.conv_bn(&format!("{name}.fuse.pw"), cout, cout, 1, 1, act),
            out_channels: cout,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, mid: usize) -> NodeId {
        let half = self.out_channels / 2;
        let a = self.branch1_dw.forward(g, x, 0);
        let a = self.branch1_pw.forward(g, a, half);
        let t = self.branch2_pw.forward(g, x, mid / 2);
        let t = self.branch2_dw.forward(g, t, 0);
        let t = self.se.forward(g, t);
        let t = self.branch2_linear.forward(g, t, half);
        let y = g.concat(&[a, t]);
        let y = g.channel_shuffle(y, 2);
        let y = self.fuse_dw.forward(g, y, 0);
        self.fuse_pw.forward(g, y, self.out_channels)
    }
}

/// ShuffleNetV2 basic unit.
#[derive(Debug, Clone, Copy)]
pub struct ShuffleBlock {
    pub pw1: ConvBn,
    pub dw: ConvBn,
    pub pw2: ConvBn,
    pub channels: usize,
}

impl ShuffleBlock {
    pub fn new(b: &mut Builder, name: &str, channels: usize, act: Activation) -> Self {
        let half = channels / 2;
        ShuffleBlock {
            pw1: b.conv_bn(&format!("{name}.pw1"), half, half, 1, 1, act),
            dw: b.dw_bn(&format!("{name}.dw"), half, 3, 1, Activation::Identity),
            pw2: b.conv_bn(&format!("{name}.pw2"), half, half, 1, 1, act),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let half = self.channels / 2;
        let x1 = g.slice_channels(x, 0, half);
        let x2 = g.slice_channels(x, half, half);
        let t = self.pw1.forward(g, x2, half);
        let t = self.dw.forward(g, t, 0);
        let t = self.pw2.forward(g, t, half);
        let y = g.concat(&[x1, t]);
        g.channel_shuffle(y, 2)
    }
}

/// ShuffleNetV2 downsampling unit.
#[derive(Debug, Clone, Copy)]
pub struct ShuffleDownBlock {
    pub branch1_dw: ConvBn,
    pub branch1_pw: ConvBn,
    pub branch2_pw1: ConvBn,
    pub branch2_dw: ConvBn,
    pub branch2_pw2: ConvBn,
    pub out_channels: usize,
}

impl ShuffleDownBlock {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, act: Activation) -> Self {
        let half = cout / 2;
        let id = Activation::Identity;
        ShuffleDownBlock {
            branch1_dw: b.dw_bn(&format!("{name}.branch1.dw"), cin, 3, 2, id),
            branch1_pw: b.conv_bn(&format!("{name}.branch1.pw"), cin, half, 1, 1, act),
            branch2_pw1: b.conv_bn(&format!("{name}.branch2.pw1"), cin, half, 1, 1, act),
            branch2_dw: b.dw_bn(&format!("{name}.branch2.dw"), half, 3, 2, id),
            branch2_pw2: b.conv_bn(&format!("{name}.branch2.pw2"), half, half, 1, 1, act),
            out_channels: cout,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let half = self.out_channels / 2;
        let a = self.branch1_dw.forward(g, x, 0);
        let a = self.branch1_pw.forward(g, a, half);
        let t = self.branch2_pw1.forward(g, x, half);
        let t = self.branch2_dw.forward(g, t, 0);
        let t = self.branch2_pw2.forward(g, t, half);
        let y = g.concat(&[a, t]);
        g.channel_shuffle(y, 2)
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, Copy)]
pub enum Block {
    EsDown(EsDownBlock),
    Es(EsBlock),
    ShuffleDown(ShuffleDownBlock),
    Shuffle(ShuffleBlock),
}

impl Block {
    fn forward(&self, g: &mut Graph, x: NodeId, mid: usize) -> NodeId {
        match self {
            Block::EsDown(b) => b.forward(g, x, mid),
            Block::Es(b) => b.forward(g, x, mid),
            Block::ShuffleDown(b) => b.forward(g, x),
            Block::Shuffle(b) => b.forward(g, x),
        }
    }
}

/// Image classification tail: 1x1 expansion, pooling, 1x1 to 1280, linear
/// classifier.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierHead {
    pub expand: ConvBn,
    pub last: crate::graph::ConvSpec,
    pub fc: crate::graph::ConvSpec,
    pub act: Activation,
    pub num_classes: usize,
}

pub const CLASSIFIER_EXPAND: usize = 1024;
pub const CLASSIFIER_HIDDEN: usize = 1280;

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: ConvBn,
    pub blocks: Vec<Block>,
    pub classifier: Option<ClassifierHead>,
}

impl Backbone {
    /// Allocates layers sized for `cfg.ratios()`.
    pub fn new(b: &mut Builder, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate().map_err(|m| Error::config(name, m))?;
        let act = cfg.activation;
        let stem = b.conv_bn(&format!("{name}.stem"), 3, cfg.stem_channels, 3, 2, act);
        let stages = cfg.stage_channels();
        let mids = cfg.mid_channels(&cfg.ratios());
        let mut blocks = Vec::with_capacity(cfg.num_blocks());
        let mut cin = cfg.stem_channels;
        let mut idx = 0;
        for (s, &n) in cfg.stage_block_counts.iter().enumerate() {
            let c = stages[s];
            for j in 0..n {
                let bname = format!("{name}.stage{s}.block{j}");
                let block = match (cfg.kind, j) {
                    (BackboneKind::Esnet, 0) => Block::EsDown(EsDownBlock::new(b, &bname, cin, c, mids[idx], act)),
                    (BackboneKind::Esnet, _) => Block::Es(EsBlock::new(b, &bname, c, mids[idx], act)),
                    (BackboneKind::ShufflenetV2, 0) => Block::ShuffleDown(ShuffleDownBlock::new(b, &bname, cin, c, act)),
                    (BackboneKind::ShufflenetV2, _) => Block::Shuffle(ShuffleBlock::new(b, &bname, c, act)),
                };
                blocks.push(block);
                cin = c;
                idx += 1;
            }
        }
        Ok(Backbone { cfg: cfg.clone(), stem, blocks, classifier: None })
    }

    /// Adds the image classification tail.
    pub fn with_classifier(mut self, b: &mut Builder, name: &str, num_classes: usize) -> Self {
        let last = *self.cfg.stage_channels().last().expect("validated");
        let act = self.cfg.activation;
        self.classifier = Some(ClassifierHead {
            expand: b.conv_bn(&format!("{name}.cls.expand"), last, CLASSIFIER_EXPAND, 1, 1, act),
            last: b.conv(&format!("{name}.cls.last"), CLASSIFIER_HIDDEN, CLASSIFIER_EXPAND, 1, 1, false, false),
            fc: b.conv(&format!("{name}.cls.fc"), num_classes, CLASSIFIER_HIDDEN, 1, 1, false, true),
            act,
            num_classes,
        });
        self
    }

    /// Runs the backbone with the given block ratios and returns the last
    /// three stage outputs (fewer if the backbone is shallower).
    pub fn forward(&self, g: &mut Graph, image: NodeId, ratios: &[f64]) -> Vec<NodeId> {
        assert_eq!(ratios.len(), self.blocks.len(), "ratio count does not match block count");
        let mids = self.cfg.mid_channels(ratios);
        let x = self.stem.forward(g, image, self.cfg.stem_channels);
        let mut x = g.max_pool(x);
        let mut stage_outputs = Vec::new();
        let mut idx = 0;
        for &n in &self.cfg.stage_block_counts {
            for _ in 0..n {
                x = self.blocks[idx].forward(g, x, mids[idx]);
                idx += 1;
            }
            stage_outputs.push(x);
        }
        let keep = self.cfg.num_outputs();
        stage_outputs.split_off(stage_outputs.len() - keep)
    }

    /// Classification logits `[n, classes, 1, 1]`.
    pub fn classify(&self, g: &mut Graph, image: NodeId, ratios: &[f64]) -> NodeId {
        let head = self.classifier.as_ref().expect("backbone built without classifier");
        let feats = self.forward(g, image, ratios);
        let x = *feats.last().expect("at least one stage");
        let x = head.expand.forward(g, x, CLASSIFIER_EXPAND);
        let x = g.global_avg_pool(x);
        let x = g.conv2d(x, head.last, CLASSIFIER_HIDDEN);
        let x = g.act(x, head.act);
        g.conv2d(x, head.fc, head.num_classes)
    }
}

/// Builds a stand-alone classification network and returns its cost at the
/// given square input size: `(multiply-accumulates, trainable params)`.
pub fn classification_cost(cfg: &BackboneConfig, input: usize, num_classes: usize) -> Result<(u64, usize)> {
    let mut store = ParamStore::new();
    let net = {
        let mut b = Builder::new(&mut store, 0);
        Backbone::new(&mut b, "backbone", cfg)?.with_classifier(&mut b, "backbone", num_classes)
    };
    let ratios = cfg.ratios();
    let mut g = Graph::shape_only(&mut store);
    let x = g.input(crate::tensor::Tensor::shape_only([1, 3, input, input]));
    net.classify(&mut g, x, &ratios);
    let macs = g.stats.macs;
    let params = g.stats.active_params(g.store());
    Ok((macs, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NormMode;
    use crate::tensor::Tensor;

    fn build(cfg: &BackboneConfig) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let net = Backbone::new(&mut Builder::new(&mut store, 3), "backbone", cfg).unwrap();
        (store, net)
    }

    fn output_shapes(cfg: &BackboneConfig, size: usize) -> Vec<[usize; 4]> {
        let (mut store, net) = build(cfg);
        let mut g = Graph::shape_only(&mut store);
        let x = g.input(Tensor::shape_only([1, 3, size, size]));
        let outs = net.forward(&mut g, x, &cfg.ratios());
        outs.iter().map(|&o| g.shape(o)).collect()
    }

    #[test]
    fn picodet_s_feature_maps_at_416() {
        let shapes = output_shapes(&BackboneConfig::default(), 416);
        assert_eq!(shapes, vec![[1, 96, 52, 52], [1, 192, 26, 26], [1, 384, 13, 13]]);
    }

    #[test]
    fn feature_maps_at_320() {
        let shapes = output_shapes(&BackboneConfig::default(), 320);
        let sizes: Vec<usize> = shapes.iter().map(|s| s[2]).collect();
        assert_eq!(sizes, vec![40, 20, 10]);
    }

    #[test]
    fn full_width_channels() {
        let cfg = BackboneConfig { width_multiplier: 1.0, ..Default::default() };
        assert_eq!(cfg.stage_channels(), vec![128, 256, 512]);
        assert_eq!(cfg.output_strides(), vec![8.0, 16.0, 32.0]);
    }

    #[test]
    fn spatial_sizes_follow_ceil_division() {
        let cfg = BackboneConfig::default();
        for size in [64, 65, 100, 127, 200, 333, 416, 640] {
            let shapes = output_shapes(&cfg, size);
            for (s, stride) in shapes.iter().zip([8, 16, 32]) {
                assert_eq!(s[2], size.div_ceil(stride), "input {size} stride {stride}");
            }
        }
    }

    #[test]
    fn channels_divisible_by_8_across_the_search_space() {
        let mut cfg = BackboneConfig::default();
        for w in [0.25, 0.5, 0.75, 1.0, 1.25] {
            cfg.width_multiplier = w;
            for r in [0.5, 0.625, 0.675, 0.75, 0.875, 1.0] {
                let ratios = vec![r; cfg.num_blocks()];
                assert!(cfg.mid_channels(&ratios).iter().all(|c| c % 8 == 0));
                assert!(cfg.stage_channels().iter().all(|c| c % 8 == 0));
            }
        }
    }

    #[test]
    fn stride_one_block_preserves_shape() {
        let mut store = ParamStore::new();
        let block = EsBlock::new(&mut Builder::new(&mut store, 1), "b", 128, 128, Activation::Hswish);
        let mut g = Graph::shape_only(&mut store);
        let x = g.input(Tensor::shape_only([1, 128, 52, 52]));
        let y = block.forward(&mut g, x, 128);
        assert_eq!(g.shape(y), [1, 128, 52, 52]);
    }

    #[test]
    fn stride_two_block_halves_and_widens() {
        let mut store = ParamStore::new();
        let block = EsDownBlock::new(&mut Builder::new(&mut store, 1), "b", 128, 256, 256, Activation::Hswish);
        let mut g = Graph::shape_only(&mut store);
        let x = g.input(Tensor::shape_only([1, 128, 52, 52]));
        let y = block.forward(&mut g, x, 256);
        assert_eq!(g.shape(y), [1, 256, 26, 26]);
    }

    #[test]
    fn every_block_parameter_receives_gradient() {
        let mut store = ParamStore::new();
        let (down, basic) = {
            let mut b = Builder::new(&mut store, 11);
            (
                EsDownBlock::new(&mut b, "down", 8, 16, 16, Activation::Hswish),
                EsBlock::new(&mut b, "basic", 16, 16, Activation::Hswish),
            )
        };
        let mut seed = 0x1234u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((seed >> 33) as f32 / (1u64 << 31) as f32) * 2.0 - 1.0
        };
        let x: Vec<f32> = (0..2 * 8 * 8 * 8).map(|_| next()).collect();
        let probe: Vec<f32> = (0..2 * 16 * 4 * 4).map(|_| next()).collect();
        store.zero_grad();
        let mut g = Graph::new(&mut store, NormMode::Batch { update: false });
        let xi = g.input(Tensor::from_vec([2, 8, 8, 8], x));
        let y = down.forward(&mut g, xi, 16);
        let y = basic.forward(&mut g, y, 16);
        g.backward(vec![(y, Tensor::from_vec([2, 16, 4, 4], probe))]);
        for (_, p) in store.iter().filter(|(_, p)| p.kind.is_trainable()) {
            assert!(p.grad.data().iter().any(|&v| v != 0.0), "{} has no gradient", p.name);
        }
    }

    #[test]
    fn shufflenet_baseline_matches_output_channels() {
        let cfg = BackboneConfig { kind: BackboneKind::ShufflenetV2, block_ratios: None, ..Default::default() };
        assert_eq!(output_shapes(&cfg, 320), output_shapes(&BackboneConfig::default(), 320));
    }

    #[test]
    fn validation_rejects_bad_ratio_length() {
        let cfg = BackboneConfig { block_ratios: Some(vec![1.0; 3]), ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
