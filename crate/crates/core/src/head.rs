//! Coupled GFL head, box decoding and non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::geometry::{decode_distances, iou, AnchorPoint, BBox};
use crate::graph::{Activation, ConvSpec, Graph, NodeId};
use crate::layers::{Builder, DpModule};
use crate::losses::FlatPredictions;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Classification bias so the initial foreground probability is 0.01.
pub const CLS_BIAS_INIT: f32 = -4.595;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub dp_count: usize,
    pub kernel: usize,
    pub reg_max: usize,
    pub share_weights_across_levels: bool,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub activation: Activation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            num_classes: 80,
            dp_count: 2,
            kernel: 5,
            reg_max: 7,
            share_weights_across_levels: false,
            score_threshold: 0.025,
            nms_iou: 0.6,
            max_detections: 100,
            activation: Activation::Hswish,
        }
    }
}

impl HeadConfig {
    pub fn bins(&self) -> usize {
        self.reg_max + 1
    }

    pub fn out_channels(&self) -> usize {
        self.num_classes + 4 * self.bins()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_classes == 0 {
            return Err("num_classes must be positive".into());
        }
        if self.reg_max == 0 {
            return Err("reg_max must be at least 1".into());
        }
        if self.kernel % 2 == 0 {
            return Err(format!("kernel must be odd, got {}", self.kernel));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(format!("score_threshold must lie in [0, 1], got {}", self.score_threshold));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(format!("nms_iou must lie in [0, 1], got {}", self.nms_iou));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadLevel {
    pub convs: Vec<DpModule>,
    pub out: ConvSpec,
}

#[derive(Debug, Clone)]
pub struct GflHead {
    pub cfg: HeadConfig,
    pub channels: usize,
    pub levels: Vec<HeadLevel>,
}

impl GflHead {
    pub fn new(b: &mut Builder, name: &str, channels: usize, num_levels: usize, cfg: &HeadConfig) -> Self {
        let distinct = if cfg.share_weights_across_levels { 1 } else { num_levels };
        let levels = (0..distinct)
            .map(|l| {
                let convs = (0..cfg.dp_count)
                    .map(|i| {
                        DpModule::new(b, &format!("{name}.level{l}.dp{i}"), channels, channels, cfg.kernel, 1, cfg.activation)
                    })
                    .collect();
                let out = b.conv(&format!("{name}.level{l}.out"), cfg.out_channels(), channels, 1, 1, false, true);
                let bias = b.store.get_mut(out.bias.expect("head output has a bias"));
                bias.value.data_mut()[..cfg.num_classes].fill(CLS_BIAS_INIT);
                HeadLevel { convs, out }
            })
            .collect();
        GflHead { cfg: cfg.clone(), channels, levels }
    }

    /// One `[n, classes + 4 * bins, h, w]` map per pyramid level.
    pub fn forward(&self, g: &mut Graph, feats: &[NodeId]) -> Vec<NodeId> {
        feats
            .iter()
            .enumerate()
            .map(|(l, &x)| {
                let level = &self.levels[if self.cfg.share_weights_across_levels { 0 } else { l }];
                let mut y = x;
                for dp in &level.convs {
                    y = dp.forward(g, y, self.channels);
                }
                g.conv2d(y, level.out, self.cfg.out_channels())
            })
            .collect()
    }
}

/// Splits raw level outputs into per-image anchor-major predictions.
pub fn flatten_outputs(outputs: &[&Tensor], num_classes: usize, bins: usize) -> Vec<FlatPredictions> {
    let n = outputs.first().map_or(0, |t| t.n());
    let anchors: usize = outputs.iter().map(|t| t.plane()).sum();
    (0..n)
        .map(|s| {
            let mut cls = Vec::with_capacity(anchors * num_classes);
            let mut reg = Vec::with_capacity(anchors * 4 * bins);
            for t in outputs {
                assert_eq!(t.c(), num_classes + 4 * bins, "head output channel mismatch");
                let plane = t.plane();
                let sample = t.sample(s);
                for p in 0..plane {
                    for c in 0..num_classes {
                        cls.push(sample[c * plane + p]);
                    }
                    for c in num_classes..num_classes + 4 * bins {
                        reg.push(sample[c * plane + p]);
                    }
                }
            }
            FlatPredictions { num_classes, bins, cls_logits: cls, reg_logits: reg }
        })
        .collect()
}

/// Inverse of [`flatten_outputs`], used to route loss gradients back.
pub fn unflatten_grads(grads: &[FlatPredictions], shapes: &[[usize; 4]]) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = shapes.iter().map(|&s| Tensor::zeros(s)).collect();
    for (s, gp) in grads.iter().enumerate() {
        let (nc, bins) = (gp.num_classes, gp.bins);
        let mut anchor = 0;
        for t in out.iter_mut() {
            let plane = t.plane();
            let sample = t.sample_mut(s);
            for p in 0..plane {
                let a = anchor + p;
                for c in 0..nc {
                    sample[c * plane + p] = gp.cls_logits[a * nc + c];
                }
                for r in 0..4 * bins {
                    sample[(nc + r) * plane + p] = gp.reg_logits[a * 4 * bins + r];
                }
            }
            anchor += plane;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box", with = "crate::geometry::xyxy")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

/// Integral decode, clip to the image and score filtering. Every
/// (anchor, class) pair above the threshold becomes a candidate.
pub fn decode(pred: &FlatPredictions, anchors: &[AnchorPoint], image_wh: (f64, f64), cfg: &HeadConfig) -> Vec<Detection> {
    let nc = pred.num_classes;
    let mut dets = Vec::new();
    for (a, anchor) in anchors.iter().enumerate() {
        let mut boxed: Option<BBox> = None;
        for c in 0..nc {
            let score = crate::losses::sigmoid(pred.cls_logits[a * nc + c] as f64);
            if score < cfg.score_threshold {
                continue;
            }
            let bbox = *boxed.get_or_insert_with(|| decode_distances(anchor, &pred.distances(a)).clip(image_wh.0, image_wh.1));
            if bbox.area() <= 0.0 {
                continue;
            }
            dets.push(Detection { bbox, score, class_id: c });
        }
    }
    dets
}

/// Class-wise greedy suppression in descending score order, ties by input
/// order, truncated to `max_detections`.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64, max_detections: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.len() >= max_detections {
            break;
        }
        let d = dets[i];
        let suppressed = kept.iter().any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    dets.clear();
    kept
}

/// Decode followed by NMS.
pub fn postprocess(pred: &FlatPredictions, anchors: &[AnchorPoint], image_wh: (f64, f64), cfg: &HeadConfig) -> Vec<Detection> {
    nms(decode(pred, anchors, image_wh, cfg), cfg.nms_iou, cfg.max_detections)
}

/// Trainable parameter count of the head.
pub fn head_params(store: &ParamStore, prefix: &str) -> usize {
    store.num_trainable_with_prefix(prefix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_hot_prediction(nc: usize, bins: usize, logit: f32, bin: usize) -> FlatPredictions {
        let mut reg = vec![-30.0f32; 4 * bins];
        for side in 0..4 {
            reg[side * bins + bin] = 30.0;
        }
        FlatPredictions { num_classes: nc, bins, cls_logits: vec![logit; nc], reg_logits: reg }
    }

    #[test]
    fn output_channels_formula() {
        assert_eq!(HeadConfig::default().out_channels(), 112);
    }

    #[test]
    fn level_shapes() {
        let mut store = ParamStore::new();
        let head = GflHead::new(&mut Builder::new(&mut store, 1), "head", 96, 4, &HeadConfig::default());
        let mut g = Graph::shape_only(&mut store);
        let sizes = [52, 26, 13, 7];
        let feats: Vec<NodeId> = sizes.iter().map(|&s| g.input(Tensor::shape_only([1, 96, s, s]))).collect();
        let outs = head.forward(&mut g, &feats);
        assert_eq!(outs.len(), 4);
        assert_eq!(g.shape(outs[0]), [1, 112, 52, 52]);
    }

    #[test]
    fn one_hot_bin_decodes_to_expected_box() {
        let cfg = HeadConfig { num_classes: 1, ..Default::default() };
        let pred = one_hot_prediction(1, 8, 5.0, 1);
        let anchor = AnchorPoint { cx: 8.0, cy: 8.0, stride: 8.0, level: 0 };
        let dets = decode(&pred, &[anchor], (100.0, 100.0), &cfg);
        assert_eq!(dets.len(), 1);
        let b = dets[0].bbox;
        for (got, want) in [b.x1, b.y1, b.x2, b.y2].iter().zip([0.0, 0.0, 16.0, 16.0]) {
            assert!((got - want).abs() < 1e-9, "{b:?}");
        }
    }

    #[test]
    fn low_scores_decode_to_nothing() {
        let pred = one_hot_prediction(3, 8, -10.0, 1);
        let anchor = AnchorPoint { cx: 4.0, cy: 4.0, stride: 8.0, level: 0 };
        assert!(decode(&pred, &[anchor], (64.0, 64.0), &HeadConfig::default()).is_empty());
    }

    #[test]
    fn two_point_fixture() {
        let cfg = HeadConfig { num_classes: 2, ..Default::default() };
        let mut p0 = one_hot_prediction(2, 8, -10.0, 2);
        p0.cls_logits[1] = 2.0;
        let p1 = one_hot_prediction(2, 8, 0.0, 3);
        let pred = FlatPredictions {
            num_classes: 2,
            bins: 8,
            cls_logits: [p0.cls_logits, vec![0.0, -10.0]].concat(),
            reg_logits: [p0.reg_logits, p1.reg_logits].concat(),
        };
        let anchors = [
            AnchorPoint { cx: 20.0, cy: 20.0, stride: 8.0, level: 0 },
            AnchorPoint { cx: 40.0, cy: 36.0, stride: 16.0, level: 1 },
        ];
        let dets = decode(&pred, &anchors, (64.0, 64.0), &cfg);
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].class_id, 1);
        let b0 = dets[0].bbox;
        assert!((b0.x1 - 4.0).abs() < 1e-9 && (b0.x2 - 36.0).abs() < 1e-9);
        // second point: distance 3 * 16 = 48, clipped to the 64x64 image
        let b1 = dets[1].bbox;
        assert_eq!(dets[1].class_id, 0);
        assert!((dets[1].score - 0.5).abs() < 1e-12);
        assert!(b1.x1.abs() < 1e-9 && (b1.x2 - 64.0).abs() < 1e-9 && b1.y1.abs() < 1e-9 && (b1.y2 - 64.0).abs() < 1e-9);
    }

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class_id: usize) -> Detection {
        Detection { bbox: BBox::new(x1, y1, x2, y2), score, class_id }
    }

    #[test]
    fn identical_boxes_keep_highest() {
        let kept = nms(vec![det(0., 0., 10., 10., 0.8, 0), det(0., 0., 10., 10., 0.9, 0)], 0.6, 100);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn disjoint_boxes_survive() {
        let kept = nms(vec![det(0., 0., 10., 10., 0.8, 0), det(20., 20., 30., 30., 0.9, 0)], 0.6, 100);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn other_classes_are_not_suppressed() {
        let kept = nms(vec![det(0., 0., 10., 10., 0.8, 0), det(0., 0., 10., 10., 0.9, 1)], 0.6, 100);
        assert_eq!(kept.len(), 2);
    }

    /// Reference: a box survives iff no higher-ranked surviving box of its
    /// class overlaps it, evaluated by rescanning all pairs.
    fn brute_force_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
        let mut alive = vec![true; dets.len()];
        for (r, &i) in order.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            for &j in &order[r + 1..] {
                if dets[j].class_id == dets[i].class_id && iou(&dets[i].bbox, &dets[j].bbox) >= thr {
                    alive[j] = false;
                }
            }
        }
        order.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect()
    }

    #[test]
    fn overlap_chain_fixture() {
        // each box overlaps its neighbour by 70% of its width
        let dets: Vec<Detection> =
            (0..6).map(|i| det(3.0 * i as f64, 0.0, 3.0 * i as f64 + 10.0, 10.0, 0.9 - 0.1 * i as f64, 0)).collect();
        let kept = nms(dets.clone(), 0.5, 100);
        assert_eq!(kept, brute_force_nms(&dets, 0.5));
        let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
        assert_eq!(scores.len(), 3);
    }

    proptest! {
        #[test]
        fn nms_matches_brute_force(raw in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0, 0.0f64..1.0, 0usize..3), 0..40)) {
            let dets: Vec<Detection> = raw.iter().map(|&(x, y, w, h, s, c)| det(x, y, x + w, y + h, s, c)).collect();
            let kept = nms(dets.clone(), 0.6, 100);
            prop_assert_eq!(&kept, &brute_force_nms(&dets, 0.6));
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) < 0.6);
                }
            }
        }
    }

    #[test]
    fn flatten_round_trip() {
        let shapes = [[2, 3 + 8, 2, 3], [2, 3 + 8, 1, 1]];
        let tensors: Vec<Tensor> =
            shapes.iter().map(|&s| Tensor::from_vec(s, (0..s.iter().product::<usize>()).map(|v| v as f32).collect())).collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let flat = flatten_outputs(&refs, 3, 2);
        assert_eq!(flat[0].num_anchors(), 7);
        assert_eq!(flat[0].cls_logits[0..3], [0.0, 6.0, 12.0]);
        let back = unflatten_grads(&flat, &shapes);
        assert_eq!(back, tensors);
    }
}
