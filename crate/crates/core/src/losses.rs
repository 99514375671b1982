//! Classification and box-regression losses with closed-form gradients.
//!
//! Every loss comes in two flavours: a probability-space function that takes
//! an already-squashed prediction (clamped to `[eps, 1 - eps]`), and a
//! logit-space form used by the training loop which is numerically stable
//! for saturated logits.

use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentResult;
use crate::geometry::{decode_distances, giou, giou_with_grad, AnchorPoint, BBox, DistanceTarget, LabeledBox};

/// Which quality-aware classification loss drives the score branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClsLoss {
    #[default]
    Vfl,
    Qfl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub cls_loss: ClsLoss,
    pub vfl_alpha: f64,
    pub vfl_gamma: f64,
    pub qfl_beta: f64,
    pub giou_weight: f64,
    pub dfl_weight: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            cls_loss: ClsLoss::Vfl,
            vfl_alpha: 0.75,
            vfl_gamma: 2.0,
            qfl_beta: 2.0,
            giou_weight: 2.0,
            dfl_weight: 0.25,
            eps: 1e-9,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        let weights = [
            ("vfl_alpha", self.vfl_alpha),
            ("vfl_gamma", self.vfl_gamma),
            ("qfl_beta", self.qfl_beta),
            ("giou_weight", self.giou_weight),
            ("dfl_weight", self.dfl_weight),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(format!("{name} must be a finite non-negative number, got {w}"));
            }
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(format!("eps must lie in (0, 0.5), got {}", self.eps));
        }
        Ok(())
    }

    fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.eps, 1.0 - self.eps)
    }
}

/// Discretisation of the regression range: bins `0, 1, ..., reg_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub reg_max: usize,
}

impl Default for DistributionSpec {
    fn default() -> Self {
        DistributionSpec { reg_max: 7 }
    }
}

impl DistributionSpec {
    pub fn new(reg_max: usize) -> Self {
        assert!(reg_max >= 1, "reg_max must be at least 1");
        DistributionSpec { reg_max }
    }

    pub fn bins(&self) -> usize {
        self.reg_max + 1
    }

    /// Upper clamp applied to regression targets so that the right-hand bin
    /// of the bracketing pair always exists.
    pub fn target_ceiling(&self) -> f64 {
        self.reg_max as f64 - 0.01
    }
}

// ---------------------------------------------------------------------------
// Probability-space losses

pub fn varifocal_loss(p: f64, q: f64, cfg: &LossConfig) -> f64 {
    let p = cfg.clamp(p);
    if q > 0.0 {
        -q * (q * p.ln() + (1.0 - q) * (1.0 - p).ln())
    } else {
        -cfg.vfl_alpha * p.powf(cfg.vfl_gamma) * (1.0 - p).ln()
    }
}

/// d varifocal_loss / dp
pub fn varifocal_loss_grad(p: f64, q: f64, cfg: &LossConfig) -> f64 {
    let p = cfg.clamp(p);
    if q > 0.0 {
        -q * (q / p - (1.0 - q) / (1.0 - p))
    } else {
        let (a, g) = (cfg.vfl_alpha, cfg.vfl_gamma);
        -a * (g * p.powf(g - 1.0) * (1.0 - p).ln() - p.powf(g) / (1.0 - p))
    }
}

pub fn quality_focal_loss(p: f64, q: f64, cfg: &LossConfig) -> f64 {
    let p = cfg.clamp(p);
    let bce = -((1.0 - q) * (1.0 - p).ln() + q * p.ln());
    (q - p).abs().powf(cfg.qfl_beta) * bce
}

/// d quality_focal_loss / dp
pub fn quality_focal_loss_grad(p: f64, q: f64, cfg: &LossConfig) -> f64 {
    let p = cfg.clamp(p);
    let beta = cfg.qfl_beta;
    let diff = p - q;
    let bce = -((1.0 - q) * (1.0 - p).ln() + q * p.ln());
    let d_bce = (1.0 - q) / (1.0 - p) - q / p;
    let w = diff.abs().powf(beta);
    let d_w = if diff == 0.0 { 0.0 } else { beta * diff.abs().powf(beta - 1.0) * diff.signum() };
    d_w * bce + w * d_bce
}

pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    1.0 - giou(pred, gt)
}

/// Gradient of `1 - giou` with respect to `pred`'s `[x1, y1, x2, y2]`.
pub fn giou_loss_grad(pred: &BBox, gt: &BBox) -> [f64; 4] {
    let (_, g) = giou_with_grad(pred, gt);
    [-g[0], -g[1], -g[2], -g[3]]
}

/// Index of the left bracketing bin and the weights of the two bins.
fn bracket(y: f64, spec: &DistributionSpec) -> (usize, f64, f64) {
    assert!((0.0..=spec.reg_max as f64).contains(&y), "DFL target {y} outside [0, {}]", spec.reg_max);
    let left = (y.floor() as usize).min(spec.reg_max - 1);
    let w_right = y - left as f64;
    (left, 1.0 - w_right, w_right)
}

/// Cross entropy of `dist` against the two-bin split of `y`.
pub fn distribution_focal_loss(dist: &[f64], y: f64, spec: &DistributionSpec, eps: f64) -> f64 {
    debug_assert_eq!(dist.len(), spec.bins());
    let (i, wl, wr) = bracket(y, spec);
    let s = |k: usize| dist[k].clamp(eps, 1.0 - eps);
    -(wl * s(i).ln() + wr * s(i + 1).ln())
}

/// d distribution_focal_loss / d dist
pub fn distribution_focal_loss_grad(dist: &[f64], y: f64, spec: &DistributionSpec, eps: f64) -> Vec<f64> {
    let (i, wl, wr) = bracket(y, spec);
    let mut g = vec![0.0; dist.len()];
    g[i] = -wl / dist[i].clamp(eps, 1.0 - eps);
    g[i + 1] = -wr / dist[i + 1].clamp(eps, 1.0 - eps);
    g
}

pub fn dfl_expectation(dist: &[f64], spec: &DistributionSpec) -> f64 {
    debug_assert_eq!(dist.len(), spec.bins());
    dist.iter().enumerate().map(|(k, &s)| k as f64 * s).sum()
}

// ---------------------------------------------------------------------------
// Logit-space forms

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Varifocal loss of `sigmoid(x)` and its derivative with respect to `x`.
pub fn varifocal_logit(x: f64, q: f64, cfg: &LossConfig) -> (f64, f64) {
    let p = sigmoid(x);
    // -log p = softplus(-x), -log(1-p) = softplus(x)
    if q > 0.0 {
        let loss = q * (q * softplus(-x) + (1.0 - q) * softplus(x));
        (loss, q * (p - q))
    } else {
        let (a, g) = (cfg.vfl_alpha, cfg.vfl_gamma);
        let pg = p.powf(g);
        let sp = softplus(x);
        let loss = a * pg * sp;
        // d/dx [a p^g softplus(x)] = a (g p^g (1-p) softplus(x) + p^g p)
        let grad = a * (g * pg * (1.0 - p) * sp + pg * p);
        (loss, grad)
    }
}

/// Quality focal loss of `sigmoid(x)` and its derivative with respect to `x`.
pub fn quality_focal_logit(x: f64, q: f64, cfg: &LossConfig) -> (f64, f64) {
    let p = sigmoid(x);
    let beta = cfg.qfl_beta;
    let bce = (1.0 - q) * softplus(x) + q * softplus(-x);
    let diff = p - q;
    let w = diff.abs().powf(beta);
    let d_w = if diff == 0.0 { 0.0 } else { beta * diff.abs().powf(beta - 1.0) * diff.signum() * p * (1.0 - p) };
    (w * bce, d_w * bce + w * diff)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// DFL on `softmax(logits)` and its gradient with respect to the logits.
pub fn dfl_logit(logits: &[f64], y: f64, spec: &DistributionSpec) -> (f64, Vec<f64>) {
    let (i, wl, wr) = bracket(y, spec);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    let loss = wl * (lse - logits[i]) + wr * (lse - logits[i + 1]);
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
    grad[i] -= wl;
    grad[i + 1] -= wr;
    (loss, grad)
}

// ---------------------------------------------------------------------------
// Composite detection loss

/// Raw head outputs for one image, flattened anchor-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatPredictions {
    pub num_classes: usize,
    pub bins: usize,
    /// `[anchor][class]` logits.
    pub cls_logits: Vec<f32>,
    /// `[anchor][side][bin]` logits, sides ordered l, t, r, b.
    pub reg_logits: Vec<f32>,
}

impl FlatPredictions {
    pub fn num_anchors(&self) -> usize {
        self.cls_logits.len() / self.num_classes.max(1)
    }

    pub fn zeros_like(&self) -> FlatPredictions {
        FlatPredictions {
            num_classes: self.num_classes,
            bins: self.bins,
            cls_logits: vec![0.0; self.cls_logits.len()],
            reg_logits: vec![0.0; self.reg_logits.len()],
        }
    }

    pub fn scores(&self) -> Vec<f64> {
        self.cls_logits.iter().map(|&x| sigmoid(x as f64)).collect()
    }

    pub fn side_logits(&self, anchor: usize, side: usize) -> Vec<f64> {
        let off = (anchor * 4 + side) * self.bins;
        self.reg_logits[off..off + self.bins].iter().map(|&v| v as f64).collect()
    }

    /// Expected distances (stride units) for one anchor.
    pub fn distances(&self, anchor: usize) -> DistanceTarget {
        let spec = DistributionSpec::new(self.bins - 1);
        let mut d = [0.0; 4];
        for (side, slot) in d.iter_mut().enumerate() {
            *slot = dfl_expectation(&softmax(&self.side_logits(anchor, side)), &spec);
        }
        DistanceTarget::from_array(d)
    }

    /// Decoded boxes for all anchors, in pixels.
    pub fn boxes(&self, anchors: &[AnchorPoint]) -> Vec<BBox> {
        anchors.iter().enumerate().map(|(a, p)| decode_distances(p, &self.distances(a))).collect()
    }
}

/// Loss terms after normalisation plus gradients with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub cls: f64,
    pub giou: f64,
    pub dfl: f64,
    pub num_positives: usize,
    pub normalizer: f64,
    pub grads: Vec<FlatPredictions>,
}

/// Per-term breakdown combined with the configured weights.
pub fn combine_terms(cls: f64, giou_term: f64, dfl_term: f64, cfg: &LossConfig) -> f64 {
    cls + cfg.giou_weight * giou_term + cfg.dfl_weight * dfl_term
}

/// `cls + w_giou * giou + w_dfl * dfl`, classification over every anchor and
/// class (negatives with target 0), box terms over positives only, each sum
/// divided by `max(1, sum of positive quality targets)` taken over the batch.
/// The DFL term of a positive is the mean over its four sides.
pub fn detection_loss(
    preds: &[FlatPredictions],
    anchors: &[AnchorPoint],
    assignments: &[AssignmentResult],
    gts: &[Vec<LabeledBox>],
    cfg: &LossConfig,
) -> LossOutput {
    assert_eq!(preds.len(), assignments.len());
    assert_eq!(preds.len(), gts.len());

    let quality_sum: f64 =
        assignments.iter().flat_map(|a| a.anchors.iter()).filter(|t| t.matched_gt.is_some()).map(|t| t.quality).sum();
    let normalizer = quality_sum.max(1.0);

    let mut cls_sum = 0.0;
    let mut giou_sum = 0.0;
    let mut dfl_sum = 0.0;
    let mut num_positives = 0;
    let mut grads = Vec::with_capacity(preds.len());

    for ((pred, assign), boxes) in preds.iter().zip(assignments).zip(gts) {
        let nc = pred.num_classes;
        let bins = pred.bins;
        let spec = DistributionSpec::new(bins - 1);
        assert_eq!(pred.num_anchors(), anchors.len());
        let mut grad = pred.zeros_like();

        for (a, target) in assign.anchors.iter().enumerate() {
            let (cls_target, q) = match (target.matched_gt, target.class_target) {
                (Some(_), Some(c)) => (Some(c), target.quality),
                _ => (None, 0.0),
            };
            for c in 0..nc {
                let x = pred.cls_logits[a * nc + c] as f64;
                let qc = if cls_target == Some(c) { q } else { 0.0 };
                let (l, g) = match cfg.cls_loss {
                    ClsLoss::Vfl => varifocal_logit(x, qc, cfg),
                    ClsLoss::Qfl => quality_focal_logit(x, qc, cfg),
                };
                cls_sum += l;
                grad.cls_logits[a * nc + c] = (g / normalizer) as f32;
            }

            let Some(gt_idx) = target.matched_gt else {
                continue;
            };
            num_positives += 1;
            let gt = &boxes[gt_idx].bbox;
            let anchor = &anchors[a];

            let mut dists = Vec::with_capacity(4);
            let mut expect = [0.0; 4];
            for (side, e) in expect.iter_mut().enumerate() {
                let s = softmax(&pred.side_logits(a, side));
                *e = dfl_expectation(&s, &spec);
                dists.push(s);
            }
            let pred_box = decode_distances(anchor, &DistanceTarget::from_array(expect));
            giou_sum += giou_loss(&pred_box, gt);
            let d_box = giou_loss_grad(&pred_box, gt);
            // x1 = cx - l*s, y1 = cy - t*s, x2 = cx + r*s, y2 = cy + b*s
            let st = anchor.stride;
            let d_dist = [-st * d_box[0], -st * d_box[1], st * d_box[2], st * d_box[3]];

            let dt = target.distance_target.unwrap_or_else(|| DistanceTarget::clamped(anchor, gt)).as_array();
            for side in 0..4 {
                let logits = pred.side_logits(a, side);
                let y = dt[side].clamp(0.0, spec.target_ceiling());
                let (l, g_dfl) = dfl_logit(&logits, y, &spec);
                dfl_sum += l / 4.0;
                let s = &dists[side];
                let off = (a * 4 + side) * bins;
                for k in 0..bins {
                    // d expect / d logit_k = s_k (k - expect)
                    let d_exp = s[k] * (k as f64 - expect[side]);
                    let g = cfg.giou_weight * d_dist[side] * d_exp + cfg.dfl_weight * g_dfl[k] / 4.0;
                    grad.reg_logits[off + k] = (g / normalizer) as f32;
                }
            }
        }
        grads.push(grad);
    }

    let cls = cls_sum / normalizer;
    let giou_term = giou_sum / normalizer;
    let dfl_term = dfl_sum / normalizer;
    LossOutput {
        total: combine_terms(cls, giou_term, dfl_term, cfg),
        cls,
        giou: giou_term,
        dfl: dfl_term,
        num_positives,
        normalizer,
        grads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::AnchorTarget;

    const TOL: f64 = 1e-4;

    #[test]
    fn varifocal_examples() {
        let cfg = LossConfig::default();
        assert!(varifocal_loss(0.0, 0.0, &cfg) < 1e-12);
        assert!(varifocal_loss(1.0, 1.0, &cfg) < 1e-8);
        assert!((varifocal_loss(0.5, 1.0, &cfg) - std::f64::consts::LN_2).abs() < TOL);
    }

    #[test]
    fn quality_focal_examples() {
        let cfg = LossConfig::default();
        assert_eq!(quality_focal_loss(0.3, 0.3, &cfg), 0.0);
        assert!((quality_focal_loss(0.5, 0.0, &cfg) - 0.1733).abs() < TOL);
        assert!((quality_focal_loss(0.5, 1.0, &cfg) - 0.1733).abs() < TOL);
    }

    #[test]
    fn giou_loss_examples() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou_loss(&a, &a), 0.0);
        let b = BBox::new(2.0, 0.0, 3.0, 1.0);
        assert!((giou_loss(&a, &b) - 4.0 / 3.0).abs() < 1e-12);
        let far = BBox::new(99.0, 99.0, 100.0, 100.0);
        assert!((giou_loss(&a, &far) - 1.9998).abs() < 1e-12);
    }

    #[test]
    fn dfl_examples() {
        let spec = DistributionSpec::default();
        let eps = LossConfig::default().eps;
        let mut one_hot = vec![0.0; 8];
        one_hot[3] = 1.0;
        assert!(distribution_focal_loss(&one_hot, 3.0, &spec, eps) < 1e-8);

        let mut half = vec![0.0; 8];
        half[2] = 0.5;
        half[3] = 0.5;
        assert!((distribution_focal_loss(&half, 2.5, &spec, eps) - 2f64.ln()).abs() < 1e-9);

        let mut at2 = vec![0.0; 8];
        at2[2] = 1.0;
        let expected = -0.5 * eps.ln();
        assert!((distribution_focal_loss(&at2, 2.5, &spec, eps) - expected).abs() < 1e-6);
    }

    #[test]
    fn dfl_minimiser_brackets_target() {
        // Grid search over the simplex for reg_max = 2 and 3.
        for reg_max in [2usize, 3] {
            let spec = DistributionSpec::new(reg_max);
            let steps = 20usize;
            for &y in &[0.3, 1.25, 1.7] {
                let mut best = (f64::INFINITY, vec![]);
                let mut stack = vec![(Vec::<usize>::new(), steps)];
                while let Some((prefix, left)) = stack.pop() {
                    if prefix.len() == reg_max {
                        let mut d: Vec<f64> = prefix.iter().map(|&v| v as f64 / steps as f64).collect();
                        d.push(left as f64 / steps as f64);
                        let l = distribution_focal_loss(&d, y, &spec, 1e-9);
                        if l < best.0 {
                            best = (l, d);
                        }
                        continue;
                    }
                    for v in 0..=left {
                        let mut p = prefix.clone();
                        p.push(v);
                        stack.push((p, left - v));
                    }
                }
                let i = y.floor() as usize;
                let mut expected = vec![0.0; reg_max + 1];
                expected[i] = i as f64 + 1.0 - y;
                expected[i + 1] = y - i as f64;
                for (got, want) in best.1.iter().zip(&expected) {
                    assert!((got - want).abs() <= 0.5 / steps as f64 + 1e-12, "y={y}: {:?}", best.1);
                }
            }
        }
    }

    #[test]
    fn expectation_examples() {
        let spec = DistributionSpec::default();
        let mut d = vec![0.0; 8];
        d[4] = 1.0;
        assert_eq!(dfl_expectation(&d, &spec), 4.0);
        assert!((dfl_expectation(&[0.125; 8], &spec) - 3.5).abs() < 1e-12);
        let mut h = vec![0.0; 8];
        h[2] = 0.5;
        h[3] = 0.5;
        assert_eq!(dfl_expectation(&h, &spec), 2.5);
    }

    #[test]
    fn varifocal_monotonicity() {
        let cfg = LossConfig::default();
        let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        for w in grid.windows(2) {
            assert!(varifocal_loss(w[1], 0.0, &cfg) > varifocal_loss(w[0], 0.0, &cfg));
            assert!(varifocal_loss(w[1], 1.0, &cfg) < varifocal_loss(w[0], 1.0, &cfg));
        }
    }

    #[test]
    fn logit_forms_agree_with_probability_forms() {
        let cfg = LossConfig::default();
        for &x in &[-3.0, -0.4, 0.0, 0.7, 2.5] {
            let p = sigmoid(x);
            for &q in &[0.0, 0.2, 0.9] {
                let (l, g) = varifocal_logit(x, q, &cfg);
                assert!((l - varifocal_loss(p, q, &cfg)).abs() < 1e-10);
                assert!((g - varifocal_loss_grad(p, q, &cfg) * p * (1.0 - p)).abs() < 1e-10);
                let (l, g) = quality_focal_logit(x, q, &cfg);
                assert!((l - quality_focal_loss(p, q, &cfg)).abs() < 1e-10);
                assert!((g - quality_focal_loss_grad(p, q, &cfg) * p * (1.0 - p)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn combine_terms_example() {
        let cfg = LossConfig::default();
        assert!((combine_terms(1.0, 0.5, 0.4, &cfg) - 2.1).abs() < 1e-12);
    }

    fn single_anchor_fixture() -> (FlatPredictions, Vec<AnchorPoint>, AssignmentResult, Vec<LabeledBox>) {
        let anchors = vec![AnchorPoint { cx: 12.0, cy: 12.0, stride: 8.0, level: 0 }];
        // one class, reg_max = 3
        let pred = FlatPredictions {
            num_classes: 1,
            bins: 4,
            cls_logits: vec![0.0],
            reg_logits: vec![
                0.0, 0.0, 0.0, 0.0, // l: uniform -> 1.5
                0.0, 0.0, 0.0, 0.0, // t
                0.0, 0.0, 0.0, 0.0, // r
                0.0, 0.0, 0.0, 0.0, // b
            ],
        };
        let gt = vec![LabeledBox::new(BBox::new(4.0, 4.0, 20.0, 28.0), 0)];
        let assign = AssignmentResult {
            anchors: vec![AnchorTarget {
                matched_gt: Some(0),
                quality: 0.5,
                class_target: Some(0),
                distance_target: Some(DistanceTarget::clamped(&anchors[0], &gt[0].bbox)),
            }],
        };
        (pred, anchors, assign, gt)
    }

    #[test]
    fn single_anchor_hand_computation() {
        let cfg = LossConfig::default();
        let (pred, anchors, assign, gt) = single_anchor_fixture();
        let out = detection_loss(&[pred], &anchors, &[assign], &[gt], &cfg);

        // p = 0.5, q = 0.5: 0.5 * (0.5 ln2 + 0.5 ln2) = 0.5 ln 2
        let vfl = 0.5 * 2f64.ln();
        // uniform bins over 0..3 -> each side 1.5 -> box (0,0,24,24)
        // gt (4,4,20,28): inter 16*20=320, union 576+384-320=640, enclosing 24*28=672
        let giou_v = 320.0 / 640.0 - (672.0 - 640.0) / 672.0;
        // targets l=1, t=1, r=1, b=2; upper clamp 2.99 leaves them untouched
        // each side: -(1 * ln 0.25) for integer targets
        let dfl_v = 0.25f64.ln().abs();
        let normalizer = 1.0; // max(1, 0.5)
        let expected = (vfl + 2.0 * (1.0 - giou_v) + 0.25 * dfl_v) / normalizer;
        assert!((out.total - expected).abs() < 1e-6, "{} vs {}", out.total, expected);
        assert_eq!(out.num_positives, 1);
    }

    #[test]
    fn no_positives_leaves_classification_only() {
        let cfg = LossConfig::default();
        let (pred, anchors, _, _) = single_anchor_fixture();
        let assign = AssignmentResult::negatives(1);
        let out = detection_loss(&[pred], &anchors, &[assign], &[vec![]], &cfg);
        assert_eq!(out.giou, 0.0);
        assert_eq!(out.dfl, 0.0);
        assert_eq!(out.normalizer, 1.0);
        assert!((out.total - out.cls).abs() < 1e-15);
        // alpha * 0.5^2 * ln 2
        assert!((out.cls - 0.75 * 0.25 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn detection_loss_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let (mut pred, anchors, assign, gt) = single_anchor_fixture();
        for (i, v) in pred.reg_logits.iter_mut().enumerate() {
            *v = ((i * 7 % 5) as f32 - 2.0) * 0.3;
        }
        pred.cls_logits[0] = -0.3;
        let out = detection_loss(&[pred.clone()], &anchors, std::slice::from_ref(&assign), std::slice::from_ref(&gt), &cfg);
        let h = 1e-3f32;
        for k in 0..pred.reg_logits.len() {
            let mut up = pred.clone();
            up.reg_logits[k] += h;
            let mut dn = pred.clone();
            dn.reg_logits[k] -= h;
            let lu = detection_loss(&[up], &anchors, std::slice::from_ref(&assign), std::slice::from_ref(&gt), &cfg).total;
            let ld = detection_loss(&[dn], &anchors, std::slice::from_ref(&assign), std::slice::from_ref(&gt), &cfg).total;
            let fd = (lu - ld) / (2.0 * h as f64);
            let an = out.grads[0].reg_logits[k] as f64;
            assert!((fd - an).abs() < 2e-3, "reg {k}: fd {fd} vs {an}");
        }
    }
}
