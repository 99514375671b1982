//! Positive/negative sample assignment for the anchor-point grid.
//!
//! Three strategies are available: ATSS (statistics of the nearest anchors),
//! the original SimOTA cost (`BCE + lambda * (1 - IoU)`) and the modified
//! SimOTA cost (`VFL + lambda * GIoU loss`). Assignment never participates in
//! backpropagation; it is recomputed from the current predictions on every
//! training iteration.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, AnchorPoint, BBox, DistanceTarget, LabeledBox};
use crate::losses::{giou_loss, varifocal_loss, LossConfig};

/// Cost assigned to anchor/GT pairs outside the center prior.
pub const NON_CANDIDATE_COST: f64 = 1e9;

/// Quality target floor for positives whose predicted box does not overlap
/// the matched ground truth yet. Keeps `matched_gt.is_some() <=> quality > 0`.
pub const MIN_POSITIVE_QUALITY: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AssignerMode {
    Atss,
    SimotaOriginal,
    #[default]
    SimotaModified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignerConfig {
    pub mode: AssignerMode,
    /// Number of largest candidate IoUs summed for the dynamic k.
    pub top_n: usize,
    /// Weight of the box term in the SimOTA cost.
    pub cost_lambda: f64,
    /// Center-prior radius in units of the anchor stride.
    pub center_radius: f64,
    pub atss_topk: usize,
    /// ATSS anchor cells are squares of side `atss_anchor_scale * stride`.
    pub atss_anchor_scale: f64,
}

impl Default for AssignerConfig {
    fn default() -> Self {
        AssignerConfig {
            mode: AssignerMode::SimotaModified,
            top_n: 10,
            cost_lambda: 6.0,
            center_radius: 2.5,
            atss_topk: 9,
            atss_anchor_scale: 5.0,
        }
    }
}

impl AssignerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.top_n < 1 {
            return Err("top_n must be >= 1".into());
        }
        if !(self.cost_lambda > 0.0) {
            return Err(format!("cost_lambda must be > 0, got {}", self.cost_lambda));
        }
        if !(self.center_radius > 0.0) {
            return Err(format!("center_radius must be > 0, got {}", self.center_radius));
        }
        if self.atss_topk < 1 {
            return Err("atss_topk must be >= 1".into());
        }
        if !(self.atss_anchor_scale > 0.0) {
            return Err("atss_anchor_scale must be > 0".into());
        }
        Ok(())
    }
}

/// Training target of a single anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AnchorTarget {
    pub matched_gt: Option<usize>,
    pub quality: f64,
    pub class_target: Option<usize>,
    pub distance_target: Option<DistanceTarget>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssignmentResult {
    pub anchors: Vec<AnchorTarget>,
}

impl AssignmentResult {
    pub fn negatives(num_anchors: usize) -> Self {
        AssignmentResult { anchors: vec![AnchorTarget::default(); num_anchors] }
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, &AnchorTarget)> {
        self.anchors.iter().enumerate().filter(|(_, t)| t.matched_gt.is_some())
    }

    pub fn num_positives(&self) -> usize {
        self.positives().count()
    }

    fn set_positive(&mut self, anchor: usize, point: &AnchorPoint, gt_idx: usize, gt: &LabeledBox, quality: f64) {
        self.anchors[anchor] = AnchorTarget {
            matched_gt: Some(gt_idx),
            quality: quality.max(MIN_POSITIVE_QUALITY),
            class_target: Some(gt.class_id),
            distance_target: Some(DistanceTarget::clamped(point, &gt.bbox)),
        };
    }

    /// Replaces every positive's quality with the IoU between its predicted
    /// box and its matched ground truth.
    pub fn requalify(&mut self, pred_boxes: &[BBox], gts: &[LabeledBox]) {
        for (a, t) in self.anchors.iter_mut().enumerate() {
            if let Some(g) = t.matched_gt {
                t.quality = iou(&pred_boxes[a], &gts[g].bbox).max(MIN_POSITIVE_QUALITY);
            }
        }
    }
}

/// Dense anchor-by-GT cost restricted to candidate anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    /// Anchor id of each row.
    pub anchor_ids: Vec<usize>,
    pub num_gt: usize,
    /// Row-major `[candidate][gt]`.
    pub costs: Vec<f64>,
}

impl CostMatrix {
    pub fn get(&self, row: usize, gt: usize) -> f64 {
        self.costs[row * self.num_gt + gt]
    }

    pub fn num_candidates(&self) -> usize {
        self.anchor_ids.len()
    }
}

/// Boolean `[anchor][gt]` mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMask {
    pub num_anchors: usize,
    pub num_gt: usize,
    pub mask: Vec<bool>,
}

impl CandidateMask {
    pub fn get(&self, anchor: usize, gt: usize) -> bool {
        self.mask[anchor * self.num_gt + gt]
    }

    pub fn candidates_of(&self, gt: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_anchors).filter(move |&a| self.get(a, gt))
    }
}

/// An anchor is a candidate for a GT when it lies inside the box, or within
/// `center_radius * stride` of the box center (Chebyshev distance).
pub fn center_prior_candidates(anchors: &[AnchorPoint], gts: &[LabeledBox], cfg: &AssignerConfig) -> CandidateMask {
    let num_gt = gts.len();
    let mut mask = vec![false; anchors.len() * num_gt];
    for (a, p) in anchors.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let inside = gt.bbox.contains_strict(p.cx, p.cy);
            let (gx, gy) = gt.bbox.center();
            let radius = cfg.center_radius * p.stride;
            let near = (p.cx - gx).abs() < radius && (p.cy - gy).abs() < radius;
            mask[a * num_gt + g] = inside || near;
        }
    }
    CandidateMask { num_anchors: anchors.len(), num_gt, mask }
}

/// `max(1, floor(sum of the top_n IoUs))`, never more than the candidate
/// count. `None` when the GT has no candidates.
pub fn dynamic_k(ious: &[f64], cfg: &AssignerConfig) -> Option<usize> {
    if ious.is_empty() {
        return None;
    }
    let mut sorted = ious.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let sum: f64 = sorted.iter().take(cfg.top_n).sum();
    Some((sum.floor() as usize).max(1).min(ious.len()))
}

fn binary_cross_entropy(p: f64, target: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Cost of matching anchor `a` to `gt`, given per-class scores of `a`.
fn pair_cost(scores: &[f64], pred: &BBox, gt: &LabeledBox, cfg: &AssignerConfig, loss_cfg: &LossConfig) -> f64 {
    let overlap = iou(pred, &gt.bbox);
    match cfg.mode {
        AssignerMode::SimotaOriginal => {
            let cls: f64 = scores
                .iter()
                .enumerate()
                .map(|(c, &p)| binary_cross_entropy(p, (c == gt.class_id) as u8 as f64, loss_cfg.eps))
                .sum();
            cls + cfg.cost_lambda * (1.0 - overlap)
        }
        _ => {
            let cls: f64 = scores
                .iter()
                .enumerate()
                .map(|(c, &p)| {
                    let q = if c == gt.class_id { overlap } else { 0.0 };
                    varifocal_loss(p, q, loss_cfg)
                })
                .sum();
            cls + cfg.cost_lambda * giou_loss(pred, &gt.bbox)
        }
    }
}

/// Cost matrix over every anchor that is a candidate for at least one GT.
///
/// `scores` are per-class probabilities, `[anchor][class]` row-major.
pub fn simota_cost(
    scores: &[f64],
    num_classes: usize,
    pred_boxes: &[BBox],
    gts: &[LabeledBox],
    candidates: &CandidateMask,
    cfg: &AssignerConfig,
    loss_cfg: &LossConfig,
) -> CostMatrix {
    let num_gt = gts.len();
    let anchor_ids: Vec<usize> = (0..candidates.num_anchors).filter(|&a| (0..num_gt).any(|g| candidates.get(a, g))).collect();
    let mut costs = Vec::with_capacity(anchor_ids.len() * num_gt);
    for &a in &anchor_ids {
        let s = &scores[a * num_classes..(a + 1) * num_classes];
        for (g, gt) in gts.iter().enumerate() {
            costs.push(if candidates.get(a, g) { pair_cost(s, &pred_boxes[a], gt, cfg, loss_cfg) } else { NON_CANDIDATE_COST });
        }
    }
    CostMatrix { anchor_ids, num_gt, costs }
}

/// Dynamic top-k assignment on the SimOTA cost.
///
/// Each GT claims its `k` cheapest candidates; an anchor claimed by several
/// GTs keeps the cheapest one. Ties break toward the lower anchor index and
/// then the lower GT index.
#[allow(clippy::too_many_arguments)]
pub fn simota_assign(
    scores: &[f64],
    num_classes: usize,
    pred_boxes: &[BBox],
    anchors: &[AnchorPoint],
    gts: &[LabeledBox],
    cfg: &AssignerConfig,
    loss_cfg: &LossConfig,
) -> AssignmentResult {
    let mut result = AssignmentResult::negatives(anchors.len());
    if gts.is_empty() {
        return result;
    }
    let mask = center_prior_candidates(anchors, gts, cfg);
    let cost = simota_cost(scores, num_classes, pred_boxes, gts, &mask, cfg, loss_cfg);

    // claims[row] = (gt, cost) pairs
    let mut claims: Vec<Option<(usize, f64)>> = vec![None; cost.num_candidates()];
    for (g, gt) in gts.iter().enumerate() {
        let rows: Vec<usize> = (0..cost.num_candidates()).filter(|&r| mask.get(cost.anchor_ids[r], g)).collect();
        let ious: Vec<f64> = rows.iter().map(|&r| iou(&pred_boxes[cost.anchor_ids[r]], &gt.bbox)).collect();
        let Some(k) = dynamic_k(&ious, cfg) else {
            log::debug!("ground truth {g} has no center-prior candidates");
            continue;
        };
        let mut order = rows;
        order.sort_by(|&x, &y| {
            cost.get(x, g)
                .partial_cmp(&cost.get(y, g))
                .unwrap_or(Ordering::Equal)
                .then(cost.anchor_ids[x].cmp(&cost.anchor_ids[y]))
        });
        for &r in order.iter().take(k) {
            let c = cost.get(r, g);
            match claims[r] {
                Some((_, prev)) if prev <= c => {}
                _ => claims[r] = Some((g, c)),
            }
        }
    }

    for (r, claim) in claims.iter().enumerate() {
        if let Some((g, _)) = *claim {
            let a = cost.anchor_ids[r];
            let q = iou(&pred_boxes[a], &gts[g].bbox);
            result.set_positive(a, &anchors[a], g, &gts[g], q);
        }
    }
    result
}

/// `mean + population std` of the candidate IoUs.
pub fn atss_threshold(ious: &[f64]) -> f64 {
    let n = ious.len() as f64;
    let mean = ious.iter().sum::<f64>() / n;
    let var = ious.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    mean + var.sqrt()
}

/// Adaptive training sample selection from anchor geometry alone.
pub fn atss_assign(anchors: &[AnchorPoint], gts: &[LabeledBox], cfg: &AssignerConfig) -> AssignmentResult {
    let mut result = AssignmentResult::negatives(anchors.len());
    if gts.is_empty() || anchors.is_empty() {
        return result;
    }
    let num_levels = anchors.iter().map(|p| p.level).max().unwrap_or(0) + 1;
    let cell = |p: &AnchorPoint| {
        let half = 0.5 * cfg.atss_anchor_scale * p.stride;
        BBox::new(p.cx - half, p.cy - half, p.cx + half, p.cy + half)
    };

    // best[a] = (gt, iou)
    let mut best: Vec<Option<(usize, f64)>> = vec![None; anchors.len()];
    for (g, gt) in gts.iter().enumerate() {
        let (gx, gy) = gt.bbox.center();
        let mut candidates = Vec::new();
        for level in 0..num_levels {
            let mut on_level: Vec<(f64, usize)> = anchors
                .iter()
                .enumerate()
                .filter(|(_, p)| p.level == level)
                .map(|(a, p)| (((p.cx - gx).powi(2) + (p.cy - gy).powi(2)).sqrt(), a))
                .collect();
            on_level.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(Ordering::Equal).then(x.1.cmp(&y.1)));
            candidates.extend(on_level.iter().take(cfg.atss_topk).map(|&(_, a)| a));
        }
        if candidates.is_empty() {
            continue;
        }
        let ious: Vec<f64> = candidates.iter().map(|&a| iou(&cell(&anchors[a]), &gt.bbox)).collect();
        let thr = atss_threshold(&ious);
        for (&a, &v) in candidates.iter().zip(&ious) {
            let p = &anchors[a];
            if v >= thr && gt.bbox.contains_strict(p.cx, p.cy) {
                match best[a] {
                    Some((_, prev)) if prev >= v => {}
                    _ => best[a] = Some((g, v)),
                }
            }
        }
    }
    for (a, b) in best.iter().enumerate() {
        if let Some((g, v)) = *b {
            result.set_positive(a, &anchors[a], g, &gts[g], v);
        }
    }
    result
}

/// Runs the configured strategy. ATSS positives get their quality from the
/// predicted boxes so every mode produces IoU-aware targets.
pub fn assign(
    scores: &[f64],
    num_classes: usize,
    pred_boxes: &[BBox],
    anchors: &[AnchorPoint],
    gts: &[LabeledBox],
    cfg: &AssignerConfig,
    loss_cfg: &LossConfig,
) -> AssignmentResult {
    match cfg.mode {
        AssignerMode::Atss => {
            let mut r = atss_assign(anchors, gts, cfg);
            r.requalify(pred_boxes, gts);
            r
        }
        AssignerMode::SimotaOriginal | AssignerMode::SimotaModified => {
            simota_assign(scores, num_classes, pred_boxes, anchors, gts, cfg, loss_cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_grid;

    fn point(cx: f64, cy: f64, stride: f64) -> AnchorPoint {
        AnchorPoint { cx, cy, stride, level: 0 }
    }

    #[test]
    fn center_prior_examples() {
        let cfg = AssignerConfig::default();
        let gt = LabeledBox::new(BBox::new(0.0, 0.0, 32.0, 32.0), 0);
        let m = center_prior_candidates(&[point(16.0, 16.0, 8.0)], &[gt], &cfg);
        assert!(m.get(0, 0));

        // huge box: far from the center but inside
        let huge = LabeledBox::new(BBox::new(0.0, 0.0, 400.0, 400.0), 0);
        let m = center_prior_candidates(&[point(120.0, 200.0, 8.0)], &[huge], &cfg);
        assert!(m.get(0, 0));

        // tiny box, anchor 3 strides from center along x
        let tiny = LabeledBox::new(BBox::new(99.0, 99.0, 101.0, 101.0), 0);
        let m = center_prior_candidates(&[point(124.0, 100.0, 8.0)], &[tiny], &cfg);
        assert!(!m.get(0, 0));
        let m = center_prior_candidates(&[point(116.0, 100.0, 8.0)], &[tiny], &cfg);
        assert!(m.get(0, 0));

        let m = center_prior_candidates(&[point(4.0, 4.0, 8.0)], &[], &cfg);
        assert!(m.mask.is_empty());
    }

    #[test]
    fn dynamic_k_examples() {
        let cfg = AssignerConfig::default();
        assert_eq!(dynamic_k(&[0.01; 5], &cfg), Some(1));
        assert_eq!(dynamic_k(&[0.9, 0.9, 0.9, 0.8], &cfg), Some(3));
        assert_eq!(dynamic_k(&[0.6, 0.5, 0.3], &cfg), Some(1));
        assert_eq!(dynamic_k(&[], &cfg), None);
        assert_eq!(dynamic_k(&[1.0, 1.0], &cfg), Some(2));
    }

    #[test]
    fn modified_cost_examples() {
        let cfg = AssignerConfig::default();
        let loss_cfg = LossConfig::default();
        let gt = LabeledBox::new(BBox::new(0.0, 0.0, 10.0, 10.0), 0);
        let anchors = [point(5.0, 5.0, 8.0)];
        let mask = center_prior_candidates(&anchors, &[gt], &cfg);

        let perfect = simota_cost(&[1.0], 1, &[gt.bbox], &[gt], &mask, &cfg, &loss_cfg);
        assert!(perfect.get(0, 0) < 1e-8);

        // pred (0,0,10,5): IoU 0.5, enclosing == union so GIoU 0.5
        let pred = BBox::new(0.0, 0.0, 10.0, 5.0);
        let c = simota_cost(&[0.5], 1, &[pred], &[gt], &mask, &cfg, &loss_cfg);
        let expected = varifocal_loss(0.5, 0.5, &loss_cfg) + 6.0 * 0.5;
        assert!((c.get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn non_candidates_get_sentinel() {
        let cfg = AssignerConfig::default();
        let loss_cfg = LossConfig::default();
        let gts =
            [LabeledBox::new(BBox::new(0.0, 0.0, 10.0, 10.0), 0), LabeledBox::new(BBox::new(200.0, 200.0, 210.0, 210.0), 0)];
        let anchors = [point(5.0, 5.0, 8.0)];
        let mask = center_prior_candidates(&anchors, &gts, &cfg);
        let c = simota_cost(&[0.5], 1, &[gts[0].bbox], &gts, &mask, &cfg, &loss_cfg);
        assert_eq!(c.get(0, 1), NON_CANDIDATE_COST);
    }

    #[test]
    fn original_cost_uses_bce_and_iou() {
        let cfg = AssignerConfig { mode: AssignerMode::SimotaOriginal, cost_lambda: 3.0, ..Default::default() };
        let loss_cfg = LossConfig::default();
        let gt = LabeledBox::new(BBox::new(0.0, 0.0, 10.0, 10.0), 1);
        let anchors = [point(5.0, 5.0, 8.0)];
        let mask = center_prior_candidates(&anchors, &[gt], &cfg);
        let pred = BBox::new(0.0, 0.0, 10.0, 5.0);
        let c = simota_cost(&[0.2, 0.5], 2, &[pred], &[gt], &mask, &cfg, &loss_cfg);
        let expected = -(0.8f64.ln()) - 0.5f64.ln() + 3.0 * 0.5;
        assert!((c.get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn no_gts_means_all_negative() {
        let anchors = make_grid(&[(4, 4)], &[8.0]).unwrap();
        let boxes = vec![BBox::new(0.0, 0.0, 8.0, 8.0); anchors.len()];
        let r = simota_assign(
            &vec![0.5; anchors.len()],
            1,
            &boxes,
            &anchors,
            &[],
            &AssignerConfig::default(),
            &LossConfig::default(),
        );
        assert_eq!(r.num_positives(), 0);
        let r = atss_assign(&anchors, &[], &AssignerConfig::default());
        assert_eq!(r.num_positives(), 0);
    }

    #[test]
    fn atss_threshold_example() {
        let thr = atss_threshold(&[0.1, 0.2, 0.3, 0.6]);
        assert!((thr - 0.4871).abs() < 1e-4);
        assert_eq!(atss_threshold(&[0.42]), 0.42);
    }

    #[test]
    fn atss_skips_gt_without_inside_centers() {
        let anchors = make_grid(&[(4, 4)], &[8.0]).unwrap();
        // 2x2 box between anchor centers (4, 12, ...)
        let gt = LabeledBox::new(BBox::new(7.0, 7.0, 9.0, 9.0), 0);
        let r = atss_assign(&anchors, &[gt], &AssignerConfig::default());
        assert_eq!(r.num_positives(), 0);
    }

    #[test]
    fn atss_assigns_center_anchor() {
        let anchors = make_grid(&[(8, 8), (4, 4)], &[8.0, 16.0]).unwrap();
        let gt = LabeledBox::new(BBox::new(8.0, 8.0, 40.0, 40.0), 2);
        let r = atss_assign(&anchors, &[gt], &AssignerConfig::default());
        assert!(r.num_positives() >= 1);
        for (a, t) in r.positives() {
            assert!(gt.bbox.contains_strict(anchors[a].cx, anchors[a].cy));
            assert_eq!(t.class_target, Some(2));
            assert!(t.quality > 0.0);
        }
    }
}
