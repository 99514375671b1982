//! Reusable convolution blocks built on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Activation, ConvSpec, Graph, NodeId, NormSpec};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Allocates named parameters with seeded initialization.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Builder { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// He-uniform kernel, `bound = sqrt(6 / fan_in)`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        cout: usize,
        cin_per_group: usize,
        k: usize,
        stride: usize,
        depthwise: bool,
        bias: bool,
    ) -> ConvSpec {
        let fan_in = (cin_per_group * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let n = cout * cin_per_group * k * k;
        let data: Vec<f32> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let weight =
            self.store.add(format!("{name}.weight"), ParamKind::Weight, Tensor::from_vec([cout, cin_per_group, k, k], data));
        let bias = bias.then(|| self.store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros([cout, 1, 1, 1])));
        ConvSpec { weight, bias, kernel: k, stride, depthwise }
    }

    pub fn norm(&mut self, name: &str, c: usize) -> NormSpec {
        let shape = [c, 1, 1, 1];
        NormSpec {
            scale: self.store.add(format!("{name}.scale"), ParamKind::NormScale, Tensor::full(shape, 1.0)),
            shift: self.store.add(format!("{name}.shift"), ParamKind::NormShift, Tensor::zeros(shape)),
            mean: self.store.add(format!("{name}.mean"), ParamKind::RunningMean, Tensor::zeros(shape)),
            var: self.store.add(format!("{name}.var"), ParamKind::RunningVar, Tensor::full(shape, 1.0)),
        }
    }

    pub fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, act: Activation) -> ConvBn {
        ConvBn {
            conv: self.conv(&format!("{name}.conv"), cout, cin, k, stride, false, false),
            norm: self.norm(&format!("{name}.bn"), cout),
            act,
        }
    }

    pub fn dw_bn(&mut self, name: &str, c: usize, k: usize, stride: usize, act: Activation) -> ConvBn {
        ConvBn {
            conv: self.conv(&format!("{name}.conv"), c, 1, k, stride, true, false),
            norm: self.norm(&format!("{name}.bn"), c),
            act,
        }
    }
}

/// Convolution, batch normalization, activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvBn {
    pub conv: ConvSpec,
    pub norm: NormSpec,
    pub act: Activation,
}

impl ConvBn {
    /// `cout` selects the leading filters; depthwise layers ignore it.
    pub fn forward(&self, g: &mut Graph, x: NodeId, cout: usize) -> NodeId {
        let cout = if self.conv.depthwise { g.channels(x) } else { cout };
        let y = g.conv2d(x, self.conv, cout);
        let y = g.batch_norm(y, self.norm);
        g.act(y, self.act)
    }

    pub fn full_out(&self, store: &ParamStore) -> usize {
        store.get(self.conv.weight).value.shape()[0]
    }
}

/// Depthwise `k x k` then pointwise 1x1, each with norm and activation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpModule {
    pub dw: ConvBn,
    pub pw: ConvBn,
}

impl DpModule {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize, act: Activation) -> Self {
        DpModule {
            dw: b.dw_bn(&format!("{name}.dw"), cin, k, stride, act),
            pw: b.conv_bn(&format!("{name}.pw"), cin, cout, 1, 1, act),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, cout: usize) -> NodeId {
        let y = self.dw.forward(g, x, 0);
        self.pw.forward(g, y, cout)
    }
}

pub const SE_REDUCTION: usize = 4;

/// Squeeze-and-excitation gate: pool, 1x1 reduce + ReLU, 1x1 expand +
/// H-Sigmoid, channel-wise product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeModule {
    pub reduce: ConvSpec,
    pub expand: ConvSpec,
}

impl SeModule {
    pub fn new(b: &mut Builder, name: &str, c: usize) -> Self {
        let hidden = c / SE_REDUCTION;
        SeModule {
            reduce: b.conv(&format!("{name}.reduce"), hidden, c, 1, 1, false, true),
            expand: b.conv(&format!("{name}.expand"), c, hidden, 1, 1, false, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let c = g.channels(x);
        assert!(c % SE_REDUCTION == 0, "SE input channels {c} not divisible by {SE_REDUCTION}");
        let s = g.global_avg_pool(x);
        let s = g.conv2d(s, self.reduce, c / SE_REDUCTION);
        let s = g.act(s, Activation::Relu);
        let s = g.conv2d(s, self.expand, c);
        let s = g.act(s, Activation::Hsigmoid);
        g.mul_channel(x, s)
    }
}

/// Half the outputs from a 1x1 conv, the other half from a cheap depthwise
/// 3x3 applied to those primaries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GhostModule {
    pub primary: ConvBn,
    pub cheap: ConvBn,
}

impl GhostModule {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, act: Activation) -> Self {
        assert!(cout % 2 == 0, "ghost module needs an even output count, got {cout}");
        GhostModule {
            primary: b.conv_bn(&format!("{name}.primary"), cin, cout / 2, 1, 1, act),
            cheap: b.dw_bn(&format!("{name}.cheap"), cout / 2, 3, 1, Activation::Identity),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, cout: usize) -> NodeId {
        assert!(cout % 2 == 0, "ghost module needs an even output count, got {cout}");
        let p = self.primary.forward(g, x, cout / 2);
        let c = self.cheap.forward(g, p, 0);
        g.concat(&[p, c])
    }
}

/// Nearest multiple of 8, halves rounding up, never below 8.
pub fn round_to_8(v: f64) -> usize {
    let r = ((v / 8.0) + 0.5).floor() as usize * 8;
    r.max(8)
}
