//! CSP-PAN neck.
//!
//! Backbone maps are first projected to a common width by 1x1 convolutions.
//! A top-down path (nearest upsampling, CSP fusion) and a bottom-up path
//! (stride-2 depthwise separable downsampling, CSP fusion) follow. An
//! optional extra level is produced from the coarsest output by one more
//! stride-2 depthwise separable convolution.

use serde::{Deserialize, Serialize};

use crate::graph::{Activation, Graph, NodeId};
use crate::layers::{Builder, ConvBn, DpModule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeckConfig {
    pub out_channels: usize,
    pub num_csp_blocks: usize,
    pub kernel: usize,
    /// Append a level at twice the coarsest stride.
    pub extra_level: bool,
    pub activation: Activation,
}

impl Default for NeckConfig {
    fn default() -> Self {
        NeckConfig { out_channels: 96, num_csp_blocks: 1, kernel: 5, extra_level: true, activation: Activation::Hswish }
    }
}

impl NeckConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.out_channels == 0 || self.out_channels % 8 != 0 {
            return Err(format!("out_channels must be a positive multiple of 8, got {}", self.out_channels));
        }
        if self.kernel % 2 == 0 {
            return Err(format!("kernel must be odd, got {}", self.kernel));
        }
        Ok(())
    }

    pub fn num_levels(&self, num_inputs: usize) -> usize {
        num_inputs + self.extra_level as usize
    }
}

/// 1x1 then a depthwise separable convolution, without a shortcut.
#[derive(Debug, Clone, Copy)]
pub struct Bottleneck {
    pub conv1: ConvBn,
    pub conv2: DpModule,
}

/// Cross-stage-partial fusion of two concatenated maps.
#[derive(Debug, Clone)]
pub struct CspLayer {
    pub main: ConvBn,
    pub short: ConvBn,
    pub blocks: Vec<Bottleneck>,
    pub merge: ConvBn,
    pub out_channels: usize,
}

impl CspLayer {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, num_blocks: usize, kernel: usize, act: Activation) -> Self {
        let mid = cout / 2;
        CspLayer {
            main: b.conv_bn(&format!("{name}.main"), cin, mid, 1, 1, act),
            short: b.conv_bn(&format!("{name}.short"), cin, mid, 1, 1, act),
            blocks: (0..num_blocks)
                .map(|i| Bottleneck {
                    conv1: b.conv_bn(&format!("{name}.blocks{i}.conv1"), mid, mid, 1, 1, act),
                    conv2: DpModule::new(b, &format!("{name}.blocks{i}.conv2"), mid, mid, kernel, 1, act),
                })
                .collect(),
            merge: b.conv_bn(&format!("{name}.merge"), 2 * mid, cout, 1, 1, act),
            out_channels: cout,
        }
    }

    pub fn forward(&self, g: &mut Graph, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(g.shape(a), g.shape(b), "CSP fusion inputs must match");
        let mid = self.out_channels / 2;
        let x = g.concat(&[a, b]);
        let mut main = self.main.forward(g, x, mid);
        let short = self.short.forward(g, x, mid);
        for blk in &self.blocks {
            let t = blk.conv1.forward(g, main, mid);
            main = blk.conv2.forward(g, t, mid);
        }
        let y = g.concat(&[main, short]);
        self.merge.forward(g, y, self.out_channels)
    }
}

#[derive(Debug, Clone)]
pub struct CspPan {
    pub cfg: NeckConfig,
    pub unify: Vec<ConvBn>,
    pub top_down: Vec<CspLayer>,
    pub downsample: Vec<DpModule>,
    pub bottom_up: Vec<CspLayer>,
    pub extra: Option<DpModule>,
}

impl CspPan {
    pub fn new(b: &mut Builder, name: &str, in_channels: &[usize], cfg: &NeckConfig) -> Self {
        let c = cfg.out_channels;
        let act = cfg.activation;
        let n = in_channels.len();
        let unify =
            in_channels.iter().enumerate().map(|(i, &cin)| b.conv_bn(&format!("{name}.unify{i}"), cin, c, 1, 1, act)).collect();
        let top_down = (0..n.saturating_sub(1))
            .map(|i| CspLayer::new(b, &format!("{name}.top_down{i}"), 2 * c, c, cfg.num_csp_blocks, cfg.kernel, act))
            .collect();
        let mut downsample = Vec::new();
        let mut bottom_up = Vec::new();
        for i in 0..n.saturating_sub(1) {
            downsample.push(DpModule::new(b, &format!("{name}.downsample{i}"), c, c, cfg.kernel, 2, act));
            bottom_up.push(CspLayer::new(b, &format!("{name}.bottom_up{i}"), 2 * c, c, cfg.num_csp_blocks, cfg.kernel, act));
        }
        let extra = cfg.extra_level.then(|| DpModule::new(b, &format!("{name}.extra"), c, c, cfg.kernel, 2, act));
        CspPan { cfg: cfg.clone(), unify, top_down, downsample, bottom_up, extra }
    }

    /// Maps ordered fine to coarse in, fine to coarse out.
    pub fn forward(&self, g: &mut Graph, inputs: &[NodeId]) -> Vec<NodeId> {
        assert_eq!(inputs.len(), self.unify.len(), "neck input count mismatch");
        let c = self.cfg.out_channels;
        let n = inputs.len();
        let unified: Vec<NodeId> = inputs.iter().zip(&self.unify).map(|(&x, conv)| conv.forward(g, x, c)).collect();

        // inner[i] holds the top-down result at level i
        let mut inner = vec![unified[n - 1]; n];
        for idx in (1..n).rev() {
            let high = inner[idx];
            let low = unified[idx - 1];
            let [_, _, h, w] = g.shape(low);
            let up = g.upsample_to(high, h, w);
            inner[idx - 1] = self.top_down[n - 1 - idx].forward(g, up, low);
        }

        let mut outs = vec![inner[0]];
        for idx in 0..n - 1 {
            let low = *outs.last().expect("non-empty");
            let down = self.downsample[idx].forward(g, low, c);
            outs.push(self.bottom_up[idx].forward(g, down, inner[idx + 1]));
        }
        if let Some(extra) = &self.extra {
            let top = *outs.last().expect("non-empty");
            outs.push(extra.forward(g, top, c));
        }
        outs
    }

    /// Every convolution in the neck with its kernel size and depthwise flag.
    pub fn conv_kernels(&self) -> Vec<(usize, bool)> {
        let mut v = Vec::new();
        let mut push = |cb: &ConvBn| v.push((cb.conv.kernel, cb.conv.depthwise));
        let dp = |d: &DpModule, push: &mut dyn FnMut(&ConvBn)| {
            push(&d.dw);
            push(&d.pw);
        };
        self.unify.iter().for_each(&mut push);
        for l in self.top_down.iter().chain(&self.bottom_up) {
            push(&l.main);
            push(&l.short);
            for blk in &l.blocks {
                push(&blk.conv1);
                dp(&blk.conv2, &mut push);
            }
            push(&l.merge);
        }
        for d in self.downsample.iter().chain(self.extra.as_ref()) {
            dp(d, &mut push);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NormMode;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn shapes(cfg: &NeckConfig, inputs: &[[usize; 4]]) -> Vec<[usize; 4]> {
        let mut store = ParamStore::new();
        let chans: Vec<usize> = inputs.iter().map(|s| s[1]).collect();
        let neck = CspPan::new(&mut Builder::new(&mut store, 1), "neck", &chans, cfg);
        let mut g = Graph::shape_only(&mut store);
        let ids: Vec<NodeId> = inputs.iter().map(|&s| g.input(Tensor::shape_only(s))).collect();
        let outs = neck.forward(&mut g, &ids);
        outs.iter().map(|&o| g.shape(o)).collect()
    }

    #[test]
    fn four_levels_at_416() {
        let out = shapes(&NeckConfig::default(), &[[1, 96, 52, 52], [1, 192, 26, 26], [1, 384, 13, 13]]);
        assert_eq!(out, vec![[1, 96, 52, 52], [1, 96, 26, 26], [1, 96, 13, 13], [1, 96, 7, 7]]);
    }

    #[test]
    fn three_level_mode_omits_extra() {
        let cfg = NeckConfig { extra_level: false, ..Default::default() };
        let out = shapes(&cfg, &[[1, 96, 40, 40], [1, 192, 20, 20], [1, 384, 10, 10]]);
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|s| s[1] == 96));
    }

    #[test]
    fn non_pointwise_convs_are_depthwise_k5() {
        let mut store = ParamStore::new();
        let neck = CspPan::new(&mut Builder::new(&mut store, 1), "neck", &[96, 192, 384], &NeckConfig::default());
        for (k, dw) in neck.conv_kernels() {
            assert!(k == 1 || (k == 5 && dw), "kernel {k} depthwise {dw}");
        }
    }

    #[test]
    fn unify_parameter_formula() {
        let mut store = ParamStore::new();
        CspPan::new(&mut Builder::new(&mut store, 1), "neck", &[96, 192, 384], &NeckConfig::default());
        assert_eq!(store.num_trainable_with_prefix("neck.unify"), (96 + 192 + 384) * 96 + 3 * 2 * 96);
    }

    #[test]
    fn csp_fusion_gradient_reaches_both_inputs() {
        let mut store = ParamStore::new();
        let layer = CspLayer::new(&mut Builder::new(&mut store, 4), "csp", 16, 8, 1, 5, Activation::Hswish);
        let mut g = Graph::new(&mut store, NormMode::Batch { update: false });
        let av: Vec<f32> = (0..2 * 8 * 16).map(|i| ((i * 37 % 11) as f32 - 5.0) / 5.0).collect();
        let bv: Vec<f32> = (0..2 * 8 * 16).map(|i| ((i * 13 % 7) as f32 - 3.0) / 3.0).collect();
        let a = g.input(Tensor::from_vec([2, 8, 4, 4], av));
        let b = g.input(Tensor::from_vec([2, 8, 4, 4], bv));
        let y = layer.forward(&mut g, a, b);
        assert_eq!(g.shape(y), [2, 8, 4, 4]);
        let probe = Tensor::full([2, 8, 4, 4], 1.0);
        g.backward(vec![(y, probe)]);
        let main = store.get(layer.main.conv.weight).grad.data().to_vec();
        // main weight is [4, 16]: columns 0..8 see input a, 8..16 see input b
        let a_cols: f32 = (0..4).flat_map(|o| (0..8).map(move |i| o * 16 + i)).map(|j| main[j].abs()).sum();
        let b_cols: f32 = (0..4).flat_map(|o| (8..16).map(move |i| o * 16 + i)).map(|j| main[j].abs()).sum();
        assert!(a_cols > 0.0 && b_cols > 0.0);
    }
}
