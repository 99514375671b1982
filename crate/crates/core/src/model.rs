//! Full detector: backbone, neck and head plus architecture presets.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::geometry::{make_grid, AnchorPoint};
use crate::graph::{Activation, Graph, NodeId};
use crate::head::{GflHead, HeadConfig};
use crate::layers::Builder;
use crate::neck::{CspPan, NeckConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub neck: NeckConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// ESNet-0.75x, CSP-PAN at 96 channels, four-level head.
    pub fn picodet_s(num_classes: usize) -> Self {
        ModelConfig { head: HeadConfig { num_classes, ..Default::default() }, ..Default::default() }
    }

    /// Quarter-width detector used for quick experiments.
    pub fn tiny(num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig { width_multiplier: 0.25, block_ratios: None, ..Default::default() },
            neck: NeckConfig { out_channels: 32, ..Default::default() },
            head: HeadConfig { num_classes, ..Default::default() },
        }
    }

    /// Two-stage, four-block network for channel search experiments.
    pub fn toy_supernet(num_classes: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                stage_base_channels: vec![64, 128],
                stage_block_counts: vec![2, 2],
                width_multiplier: 1.0,
                block_ratios: None,
                stem_channels: 16,
                ..Default::default()
            },
            neck: NeckConfig { out_channels: 32, extra_level: false, ..Default::default() },
            head: HeadConfig { num_classes, dp_count: 1, ..Default::default() },
        }
    }

    /// Uses one activation everywhere.
    pub fn with_activation(mut self, act: Activation) -> Self {
        self.backbone.activation = act;
        self.neck.activation = act;
        self.head.activation = act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate().map_err(|m| Error::config("model.backbone", m))?;
        self.neck.validate().map_err(|m| Error::config("model.neck", m))?;
        self.head.validate().map_err(|m| Error::config("model.head", m))?;
        Ok(())
    }

    pub fn strides(&self) -> Vec<f64> {
        let mut s = self.backbone.output_strides();
        if self.neck.extra_level {
            let last = *s.last().expect("validated backbone");
            s.push(2.0 * last);
        }
        s
    }
}

/// Layer structure of a detector; weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct PicoDet {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub neck: CspPan,
    pub head: GflHead,
}

impl PicoDet {
    /// Allocates parameters for `cfg` into `store`.
    pub fn build(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(store, seed);
        let backbone = Backbone::new(&mut b, "backbone", &cfg.backbone)?;
        let neck = CspPan::new(&mut b, "neck", &cfg.backbone.output_channels(), &cfg.neck);
        let levels = cfg.neck.num_levels(cfg.backbone.num_outputs());
        let head = GflHead::new(&mut b, "head", cfg.neck.out_channels, levels, &cfg.head);
        Ok(PicoDet { cfg: cfg.clone(), backbone, neck, head })
    }

    /// Raw head outputs per level using the configured block ratios.
    pub fn forward(&self, g: &mut Graph, images: NodeId) -> Vec<NodeId> {
        let ratios = self.cfg.backbone.ratios();
        self.forward_with_ratios(g, images, &ratios)
    }

    pub fn forward_with_ratios(&self, g: &mut Graph, images: NodeId, ratios: &[f64]) -> Vec<NodeId> {
        let feats = self.backbone.forward(g, images, ratios);
        let pyramid = self.neck.forward(g, &feats);
        self.head.forward(g, &pyramid)
    }

    pub fn anchors(&self, level_shapes: &[(usize, usize)]) -> Result<Vec<AnchorPoint>> {
        make_grid(level_shapes, &self.cfg.strides())
    }
}

/// Static cost of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelCost {
    /// Trainable parameters (all of them, independent of the ratios used).
    pub params: usize,
    /// Trainable parameters touched by this forward pass.
    pub active_params: usize,
    pub macs: u64,
    pub elementwise: u64,
}

impl ModelCost {
    /// Multiply-accumulates in units of 1e9, the figure often quoted as FLOPs
    /// for mobile networks.
    pub fn gmacs(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    /// Two operations per multiply-accumulate plus elementwise work.
    pub fn gflops_strict(&self) -> f64 {
        (2 * self.macs + self.elementwise) as f64 / 1e9
    }
}

/// Shape-only trace of the detector at a square input.
pub fn model_cost(cfg: &ModelConfig, input: usize, ratios: Option<&[f64]>) -> Result<ModelCost> {
    let mut store = ParamStore::new();
    let model = PicoDet::build(cfg, &mut store, 0)?;
    Ok(trace_cost(&model, &mut store, input, ratios))
}

pub fn trace_cost(model: &PicoDet, store: &mut ParamStore, input: usize, ratios: Option<&[f64]>) -> ModelCost {
    let params = store.num_trainable();
    let default_ratios = model.cfg.backbone.ratios();
    let ratios = ratios.unwrap_or(&default_ratios);
    let mut g = Graph::shape_only(store);
    let x = g.input(Tensor::shape_only([1, 3, input, input]));
    model.forward_with_ratios(&mut g, x, ratios);
    ModelCost { params, active_params: g.stats.active_params(g.store()), macs: g.stats.macs, elementwise: g.stats.elementwise }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_for_four_levels() {
        assert_eq!(ModelConfig::picodet_s(80).strides(), vec![8.0, 16.0, 32.0, 64.0]);
        assert_eq!(ModelConfig::toy_supernet(3).strides(), vec![8.0, 16.0]);
    }

    #[test]
    fn anchor_count_matches_head_outputs() {
        let cfg = ModelConfig::tiny(3);
        let mut store = ParamStore::new();
        let model = PicoDet::build(&cfg, &mut store, 0).unwrap();
        let mut g = Graph::shape_only(&mut store);
        let x = g.input(Tensor::shape_only([1, 3, 128, 128]));
        let outs = model.forward(&mut g, x);
        let shapes: Vec<(usize, usize)> = outs.iter().map(|&o| (g.shape(o)[2], g.shape(o)[3])).collect();
        assert_eq!(shapes, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        assert_eq!(model.anchors(&shapes).unwrap().len(), 256 + 64 + 16 + 4);
    }

    #[test]
    fn doubling_input_quadruples_conv_work() {
        let cfg = ModelConfig::picodet_s(80);
        let a = model_cost(&cfg, 320, None).unwrap();
        let b = model_cost(&cfg, 640, None).unwrap();
        let ratio = b.macs as f64 / a.macs as f64;
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn smaller_ratios_cost_less() {
        let cfg = ModelConfig::toy_supernet(3);
        let full = model_cost(&cfg, 128, Some(&[1.0; 4])).unwrap();
        let half = model_cost(&cfg, 128, Some(&[0.5; 4])).unwrap();
        assert!(half.macs < full.macs);
        assert!(half.active_params < full.active_params);
        assert_eq!(full.active_params, full.params);
    }
}
