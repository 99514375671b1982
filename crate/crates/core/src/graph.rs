//! Reverse-mode tape for convolutional networks.
//!
//! A [`Graph`] records every operation of one forward pass together with
//! whatever it needs for the backward pass. Parameters live in a
//! [`ParamStore`]; convolution and normalization layers may use a leading
//! slice of a larger parameter (first `cout` filters, first `cin` input
//! channels), which is how child networks share supernet weights.
//!
//! In shape-only mode nothing is computed: nodes carry shapes and the graph
//! tallies multiply-accumulates, elementwise work and active parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    #[default]
    #[serde(alias = "hard_swish")]
    Hswish,
    Hsigmoid,
    Identity,
}

pub const LEAKY_SLOPE: f32 = 0.1;

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Hswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
            Activation::Hsigmoid => (x + 3.0).clamp(0.0, 6.0) / 6.0,
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f32) -> f32 {
        match self {
            Activation::Relu => (x > 0.0) as u8 as f32,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Hswish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
            Activation::Hsigmoid => {
                if x > -3.0 && x < 3.0 {
                    1.0 / 6.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// How batch normalization picks its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Stored running statistics (inference).
    Running,
    /// Statistics of the current batch, optionally folded into the running
    /// averages.
    Batch { update: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub depthwise: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormSpec {
    pub scale: ParamId,
    pub shift: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

/// Work tallied during a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostStats {
    pub macs: u64,
    pub elementwise: u64,
    /// Active element count of every parameter touched.
    pub param_use: BTreeMap<ParamId, usize>,
}

impl CostStats {
    pub fn active_params(&self, store: &ParamStore) -> usize {
        self.param_use.iter().filter(|(id, _)| store.get(**id).kind.is_trainable()).map(|(_, n)| *n).sum()
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Conv { x: NodeId, spec: ConvSpec, geom: ConvGeom, weight: Vec<f32> },
    Norm { x: NodeId, spec: NormSpec, xhat: Vec<f32>, inv_std: Vec<f32>, batch_stats: bool },
    Act { x: NodeId, kind: Activation },
    Add { a: NodeId, b: NodeId },
    MulChannel { x: NodeId, gate: NodeId },
    GlobalAvgPool { x: NodeId },
    Concat { parts: Vec<NodeId> },
    Slice { x: NodeId, start: usize },
    Shuffle { x: NodeId, groups: usize },
    Upsample { x: NodeId },
    MaxPool { x: NodeId, argmax: Vec<u32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s mut ParamStore,
    nodes: Vec<Node>,
    norm: NormMode,
    shape_only: bool,
    pub stats: CostStats,
    col: Vec<f32>,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s mut ParamStore, norm: NormMode) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            norm,
            shape_only: false,
            stats: CostStats::default(),
            col: Vec::new(),
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// A graph that propagates shapes and counts work without computing.
    pub fn shape_only(store: &'s mut ParamStore) -> Self {
        let mut g = Graph::new(store, NormMode::Running);
        g.shape_only = true;
        g
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 4] {
        self.nodes[id.0].value.shape()
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.shape(id)[1]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn alloc(&self, shape: [usize; 4]) -> Tensor {
        if self.shape_only {
            Tensor::shape_only(shape)
        } else {
            Tensor::zeros(shape)
        }
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn note_param(&mut self, id: ParamId, active: usize) {
        self.stats.param_use.insert(id, active);
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        let value = if self.shape_only { Tensor::shape_only(value.shape()) } else { value };
        self.push(value, Op::Input, false)
    }

    /// Convolution with zero padding `kernel / 2`, using the leading `cout`
    /// filters of the parameter and as many input channels as `x` has.
    pub fn conv2d(&mut self, x: NodeId, spec: ConvSpec, cout: usize) -> NodeId {
        let [n, cin, h, w] = self.shape(x);
        let wshape = self.store.get(spec.weight).value.shape();
        let k = spec.kernel;
        let cin_pg = if spec.depthwise { 1 } else { cin };
        assert_eq!(wshape[2], k, "kernel size mismatch");
        if spec.depthwise {
            assert_eq!(cout, cin, "depthwise conv must keep channel count");
            assert_eq!(wshape[1], 1);
        } else {
            assert!(cin <= wshape[1], "conv input channels {cin} exceed parameter {wshape:?}");
        }
        assert!(cout <= wshape[0], "conv output channels {cout} exceed parameter {wshape:?}");
        let geom = ConvGeom::new(cin, cout, k, spec.stride, k / 2, h, w);
        let macs = (n * cout * cin_pg * k * k * geom.oh * geom.ow) as u64;
        self.stats.macs += macs;
        self.note_param(spec.weight, cout * cin_pg * k * k);
        if let Some(b) = spec.bias {
            self.note_param(b, cout);
        }
        let mut out = self.alloc([n, cout, geom.oh, geom.ow]);
        if self.shape_only {
            return self.push(out, Op::Input, false);
        }

        let full = self.store.get(spec.weight).value.data();
        let per_filter = wshape[1] * k * k;
        let weight: Vec<f32> = if cin_pg == wshape[1] {
            full[..cout * per_filter].to_vec()
        } else {
            let mut v = Vec::with_capacity(cout * cin_pg * k * k);
            for o in 0..cout {
                v.extend_from_slice(&full[o * per_filter..o * per_filter + cin_pg * k * k]);
            }
            v
        };
        let xv = &self.nodes[x.0].value;
        for s in 0..n {
            let xs = xv.sample(s);
            let ys = out.sample_mut(s);
            if spec.depthwise {
                kernels::depthwise_forward(xs, &weight, &geom, ys);
            } else {
                kernels::dense_forward(xs, &weight, &geom, ys, &mut self.col);
            }
        }
        if let Some(b) = spec.bias {
            let bias = &self.store.get(b).value.data()[..cout];
            let plane = geom.oh * geom.ow;
            for s in 0..n {
                let ys = out.sample_mut(s);
                for (o, &bv) in bias.iter().enumerate() {
                    ys[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        self.push(out, Op::Conv { x, spec, geom, weight }, true)
    }

    pub fn batch_norm(&mut self, x: NodeId, spec: NormSpec) -> NodeId {
        let [n, c, h, w] = self.shape(x);
        for id in [spec.scale, spec.shift, spec.mean, spec.var] {
            assert!(self.store.get(id).value.numel() >= c, "norm parameter narrower than input");
            self.note_param(id, c);
        }
        self.stats.elementwise += (n * c * h * w) as u64;
        let mut out = self.alloc([n, c, h, w]);
        if self.shape_only {
            return self.push(out, Op::Input, false);
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let eps = self.bn_eps;
        let batch_stats = !matches!(self.norm, NormMode::Running);
        let mut inv_std = vec![0.0f32; c];
        let mut xhat = vec![0.0f32; n * c * plane];
        let mut means = vec![0.0f32; c];
        let mut vars = vec![0.0f32; c];
        {
            let xv = self.nodes[x.0].value.data();
            for ch in 0..c {
                let (mean, var) = if batch_stats {
                    let mut sum = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        sum += xv[base..base + plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        sq += xv[base..base + plane].iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>();
                    }
                    (mean as f32, (sq / count) as f32)
                } else {
                    (self.store.get(spec.mean).value.data()[ch], self.store.get(spec.var).value.data()[ch])
                };
                means[ch] = mean;
                vars[ch] = var;
                inv_std[ch] = 1.0 / (var + eps).sqrt();
            }
            let gamma = &self.store.get(spec.scale).value.data()[..c];
            let beta = &self.store.get(spec.shift).value.data()[..c];
            let od = out.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    let (m, is, g, b) = (means[ch], inv_std[ch], gamma[ch], beta[ch]);
                    for i in base..base + plane {
                        let xh = (xv[i] - m) * is;
                        xhat[i] = xh;
                        od[i] = g * xh + b;
                    }
                }
            }
        }
        if let NormMode::Batch { update: true } = self.norm {
            let m = self.bn_momentum;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 } as f32;
            let rm = self.store.get_mut(spec.mean).value.data_mut();
            for ch in 0..c {
                rm[ch] = (1.0 - m) * rm[ch] + m * means[ch];
            }
            let rv = self.store.get_mut(spec.var).value.data_mut();
            for ch in 0..c {
                rv[ch] = (1.0 - m) * rv[ch] + m * vars[ch] * unbias;
            }
        }
        self.push(out, Op::Norm { x, spec, xhat, inv_std, batch_stats }, true)
    }

    pub fn act(&mut self, x: NodeId, kind: Activation) -> NodeId {
        if kind == Activation::Identity {
            return x;
        }
        let shape = self.shape(x);
        self.stats.elementwise += shape.iter().product::<usize>() as u64;
        let mut out = self.alloc(shape);
        if !self.shape_only {
            let xv = self.nodes[x.0].value.data();
            for (o, &v) in out.data_mut().iter_mut().zip(xv) {
                *o = kind.apply(v);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Act { x, kind }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let shape = self.shape(a);
        assert_eq!(shape, self.shape(b), "add shape mismatch");
        self.stats.elementwise += shape.iter().product::<usize>() as u64;
        let mut out = self.alloc(shape);
        if !self.shape_only {
            let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
            for ((o, &x), &y) in out.data_mut().iter_mut().zip(av).zip(bv) {
                *o = x + y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    /// `x * gate` with a `[n, c, 1, 1]` gate broadcast over space.
    pub fn mul_channel(&mut self, x: NodeId, gate: NodeId) -> NodeId {
        let shape = self.shape(x);
        assert_eq!(self.shape(gate), [shape[0], shape[1], 1, 1], "gate shape mismatch");
        self.stats.elementwise += shape.iter().product::<usize>() as u64;
        let mut out = self.alloc(shape);
        if !self.shape_only {
            let plane = shape[2] * shape[3];
            let xv = self.nodes[x.0].value.data();
            let gv = self.nodes[gate.0].value.data();
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let gval = gv[i];
                for (o, &v) in chunk.iter_mut().zip(&xv[i * plane..(i + 1) * plane]) {
                    *o = v * gval;
                }
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        self.push(out, Op::MulChannel { x, gate }, rg)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let [n, c, h, w] = self.shape(x);
        self.stats.elementwise += (n * c * h * w) as u64;
        let mut out = self.alloc([n, c, 1, 1]);
        if !self.shape_only {
            let plane = h * w;
            let xv = self.nodes[x.0].value.data();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o = xv[i * plane..(i + 1) * plane].iter().sum::<f32>() / plane as f32;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool { x }, rg)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let [n, _, h, w] = self.shape(parts[0]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!((s[0], s[2], s[3]), (n, h, w), "concat shape mismatch");
            c_total += s[1];
        }
        let mut out = self.alloc([n, c_total, h, w]);
        if !self.shape_only {
            let plane = h * w;
            for s in 0..n {
                let mut off = 0;
                let dst = out.sample_mut(s);
                for &p in parts {
                    let src = self.nodes[p.0].value.sample(s);
                    dst[off..off + src.len()].copy_from_slice(src);
                    off += src.len();
                }
                debug_assert_eq!(off, c_total * plane);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat { parts: parts.to_vec() }, rg)
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let [n, c, h, w] = self.shape(x);
        assert!(start + len <= c, "channel slice out of range");
        let mut out = self.alloc([n, len, h, w]);
        if !self.shape_only {
            let plane = h * w;
            for s in 0..n {
                let src = &self.nodes[x.0].value.sample(s)[start * plane..(start + len) * plane];
                out.sample_mut(s).copy_from_slice(src);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Slice { x, start }, rg)
    }

    /// Channel `gi * (C / groups) + i` moves to position `i * groups + gi`.
    pub fn channel_shuffle(&mut self, x: NodeId, groups: usize) -> NodeId {
        let [n, c, h, w] = self.shape(x);
        assert!(groups > 0 && c % groups == 0, "channels {c} not divisible by {groups} groups");
        let mut out = self.alloc([n, c, h, w]);
        if !self.shape_only {
            let plane = h * w;
            let per = c / groups;
            for s in 0..n {
                let src = self.nodes[x.0].value.sample(s);
                let dst = out.sample_mut(s);
                for gi in 0..groups {
                    for i in 0..per {
                        let from = gi * per + i;
                        let to = i * groups + gi;
                        dst[to * plane..(to + 1) * plane].copy_from_slice(&src[from * plane..(from + 1) * plane]);
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Shuffle { x, groups }, rg)
    }

    /// Nearest-neighbour 2x upsampling cropped to `(h, w)`.
    pub fn upsample_to(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let [n, c, ih, iw] = self.shape(x);
        assert!(h <= 2 * ih && w <= 2 * iw, "upsample target too large");
        self.stats.elementwise += (n * c * h * w) as u64;
        let mut out = self.alloc([n, c, h, w]);
        if !self.shape_only {
            let xv = self.nodes[x.0].value.data();
            let od = out.data_mut();
            for nc in 0..n * c {
                for y in 0..h {
                    for xx in 0..w {
                        od[(nc * h + y) * w + xx] = xv[(nc * ih + y / 2) * iw + xx / 2];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample { x }, rg)
    }

    /// 3x3 stride-2 max pooling, padding 1.
    pub fn max_pool(&mut self, x: NodeId) -> NodeId {
        let [n, c, h, w] = self.shape(x);
        let (oh, ow) = (kernels::out_size(h, 3, 2, 1), kernels::out_size(w, 3, 2, 1));
        self.stats.elementwise += (n * c * oh * ow * 9) as u64;
        let mut out = self.alloc([n, c, oh, ow]);
        let mut argmax = Vec::new();
        if !self.shape_only {
            argmax = vec![0u32; n * c * oh * ow];
            let per_in = c * h * w;
            let per_out = c * oh * ow;
            for s in 0..n {
                let xs = self.nodes[x.0].value.sample(s);
                kernels::maxpool_forward(
                    xs,
                    c,
                    h,
                    w,
                    oh,
                    ow,
                    &mut out.data_mut()[s * per_out..(s + 1) * per_out],
                    &mut argmax[s * per_out..(s + 1) * per_out],
                );
                for a in &mut argmax[s * per_out..(s + 1) * per_out] {
                    *a += (s * per_in) as u32;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MaxPool { x, argmax }, rg)
    }

    /// Backpropagates from the given output gradients, accumulating into the
    /// parameter store's gradient buffers.
    pub fn backward(&mut self, seeds: Vec<(NodeId, Tensor)>) {
        assert!(!self.shape_only, "cannot backpropagate a shape-only graph");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.shape(id), "seed gradient shape mismatch");
            accumulate(&mut grads, id, g);
        }
        let Graph { store, nodes, col, .. } = self;
        for i in (0..nodes.len()).rev() {
            let Some(gy) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let rg = |id: NodeId| nodes[id.0].requires_grad;
            match &node.op {
                Op::Input => {}
                Op::Conv { x, spec, geom, weight } => {
                    let xv = &nodes[x.0].value;
                    let n = xv.n();
                    let mut dw = vec![0.0f32; weight.len()];
                    let mut dx = if rg(*x) { Some(Tensor::zeros(xv.shape())) } else { None };
                    for s in 0..n {
                        let dxs = dx.as_mut().map(|t| t.sample_mut(s));
                        if spec.depthwise {
                            kernels::depthwise_backward(xv.sample(s), weight, gy.sample(s), geom, &mut dw, dxs);
                        } else {
                            kernels::dense_backward(xv.sample(s), weight, gy.sample(s), geom, &mut dw, dxs, col);
                        }
                    }
                    let param = store.get_mut(spec.weight);
                    let wshape = param.value.shape();
                    let per_filter = wshape[1] * geom.k * geom.k;
                    let active = dw.len() / geom.cout;
                    let pg = param.grad.data_mut();
                    for o in 0..geom.cout {
                        for (d, &v) in
                            pg[o * per_filter..o * per_filter + active].iter_mut().zip(&dw[o * active..(o + 1) * active])
                        {
                            *d += v;
                        }
                    }
                    if let Some(b) = spec.bias {
                        let plane = geom.oh * geom.ow;
                        let bg = store.get_mut(b).grad.data_mut();
                        for s in 0..n {
                            let g = gy.sample(s);
                            for o in 0..geom.cout {
                                bg[o] += g[o * plane..(o + 1) * plane].iter().sum::<f32>();
                            }
                        }
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Norm { x, spec, xhat, inv_std, batch_stats } => {
                    let [n, c, h, w] = gy.shape();
                    let plane = h * w;
                    let count = (n * plane) as f32;
                    let gd = gy.data();
                    let mut sum_dy = vec![0.0f32; c];
                    let mut sum_dy_xhat = vec![0.0f32; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let mut a = 0.0f64;
                            let mut b = 0.0f64;
                            for i in base..base + plane {
                                a += gd[i] as f64;
                                b += (gd[i] * xhat[i]) as f64;
                            }
                            sum_dy[ch] += a as f32;
                            sum_dy_xhat[ch] += b as f32;
                        }
                    }
                    {
                        let sg = store.get_mut(spec.scale).grad.data_mut();
                        for ch in 0..c {
                            sg[ch] += sum_dy_xhat[ch];
                        }
                        let bg = store.get_mut(spec.shift).grad.data_mut();
                        for ch in 0..c {
                            bg[ch] += sum_dy[ch];
                        }
                    }
                    if rg(*x) {
                        let gamma = &store.get(spec.scale).value.data()[..c];
                        let mut dx = Tensor::zeros([n, c, h, w]);
                        let dd = dx.data_mut();
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * plane;
                                let k = gamma[ch] * inv_std[ch];
                                if *batch_stats {
                                    let m1 = sum_dy[ch] / count;
                                    let m2 = sum_dy_xhat[ch] / count;
                                    for i in base..base + plane {
                                        dd[i] = k * (gd[i] - m1 - xhat[i] * m2);
                                    }
                                } else {
                                    for i in base..base + plane {
                                        dd[i] = k * gd[i];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Act { x, kind } => {
                    let xv = nodes[x.0].value.data();
                    let mut dx = gy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv) {
                        *d *= kind.derivative(v);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    if rg(*a) && rg(*b) {
                        accumulate(&mut grads, *a, gy.clone());
                        accumulate(&mut grads, *b, gy);
                    } else if rg(*a) {
                        accumulate(&mut grads, *a, gy);
                    } else if rg(*b) {
                        accumulate(&mut grads, *b, gy);
                    }
                }
                Op::MulChannel { x, gate } => {
                    let xv = &nodes[x.0].value;
                    let gv = nodes[gate.0].value.data();
                    let plane = xv.plane();
                    if rg(*gate) {
                        let mut dg = Tensor::zeros(nodes[gate.0].value.shape());
                        for (i, d) in dg.data_mut().iter_mut().enumerate() {
                            *d = gy.data()[i * plane..(i + 1) * plane]
                                .iter()
                                .zip(&xv.data()[i * plane..(i + 1) * plane])
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                        accumulate(&mut grads, *gate, dg);
                    }
                    if rg(*x) {
                        let mut dx = gy;
                        for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                            chunk.iter_mut().for_each(|v| *v *= gv[i]);
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    let shape = nodes[x.0].value.shape();
                    let plane = shape[2] * shape[3];
                    let mut dx = Tensor::zeros(shape);
                    for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                        let v = gy.data()[i] / plane as f32;
                        chunk.iter_mut().for_each(|d| *d = v);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { parts } => {
                    let n = gy.n();
                    let mut off = 0;
                    for &p in parts {
                        let shape = nodes[p.0].value.shape();
                        let len = shape[1] * shape[2] * shape[3];
                        if rg(p) {
                            let mut dp = Tensor::zeros(shape);
                            for s in 0..n {
                                dp.sample_mut(s).copy_from_slice(&gy.sample(s)[off..off + len]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        off += len;
                    }
                }
                Op::Slice { x, start } => {
                    let shape = nodes[x.0].value.shape();
                    let plane = shape[2] * shape[3];
                    let mut dx = Tensor::zeros(shape);
                    let len = gy.c() * plane;
                    for s in 0..shape[0] {
                        dx.sample_mut(s)[start * plane..start * plane + len].copy_from_slice(gy.sample(s));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Shuffle { x, groups } => {
                    let [n, c, h, w] = gy.shape();
                    let plane = h * w;
                    let per = c / groups;
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for s in 0..n {
                        let src = gy.sample(s);
                        let dst = dx.sample_mut(s);
                        for gi in 0..*groups {
                            for i in 0..per {
                                let from = gi * per + i;
                                let to = i * groups + gi;
                                dst[from * plane..(from + 1) * plane].copy_from_slice(&src[to * plane..(to + 1) * plane]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample { x } => {
                    let [n, c, ih, iw] = nodes[x.0].value.shape();
                    let [_, _, h, w] = gy.shape();
                    let mut dx = Tensor::zeros([n, c, ih, iw]);
                    let dd = dx.data_mut();
                    let gd = gy.data();
                    for nc in 0..n * c {
                        for y in 0..h {
                            for xx in 0..w {
                                dd[(nc * ih + y / 2) * iw + xx / 2] += gd[(nc * h + y) * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(nodes[x.0].value.shape());
                    let dd = dx.data_mut();
                    for (&a, &g) in argmax.iter().zip(gy.data()) {
                        dd[a as usize] += g;
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
