//! COCO-style mean average precision.
//!
//! Detections are matched greedily per image and class in descending score
//! order, each to the unmatched ground truth with the highest IoU at or above
//! the threshold. Precision is made monotone and sampled at 101 recall points.
//! AP is averaged over IoU thresholds 0.50:0.05:0.95 and over classes that
//! have at least one ground-truth box.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub const MAX_DETECTIONS_PER_IMAGE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub image_id: u64,
    #[serde(rename = "box", with = "crate::geometry::xyxy")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub image_id: u64,
    pub bbox: BBox,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassAp {
    pub ap: f64,
    pub ap50: f64,
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapResult {
    /// Mean over IoU 0.50:0.95.
    pub map: f64,
    /// Mean at IoU 0.50.
    pub map50: f64,
    pub per_class: BTreeMap<usize, ClassAp>,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Average precision from score-sorted true-positive flags.
pub fn interpolated_ap(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

pub fn evaluate_map(preds: &[ImageDetection], gts: &[GroundTruthBox], num_classes: usize) -> Result<MapResult> {
    if let Some(d) = preds.iter().find(|d| d.class_id >= num_classes) {
        return Err(Error::InvalidArgument(format!("prediction class id {} outside 0..{num_classes}", d.class_id)));
    }
    if let Some(g) = gts.iter().find(|g| g.class_id >= num_classes) {
        return Err(Error::InvalidArgument(format!("ground-truth class id {} outside 0..{num_classes}", g.class_id)));
    }

    // keep the highest-scoring detections of each image
    let mut by_image: BTreeMap<u64, Vec<ImageDetection>> = BTreeMap::new();
    for d in preds {
        by_image.entry(d.image_id).or_default().push(*d);
    }
    let mut kept: Vec<ImageDetection> = Vec::new();
    for dets in by_image.values_mut() {
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(MAX_DETECTIONS_PER_IMAGE);
        kept.extend_from_slice(dets);
    }

    let mut gt_by_key: BTreeMap<(usize, u64), Vec<BBox>> = BTreeMap::new();
    for g in gts {
        gt_by_key.entry((g.class_id, g.image_id)).or_default().push(g.bbox);
    }
    // (score, box, input order) per (class, image)
    type Scored = Vec<(f64, BBox, usize)>;
    let mut det_by_key: BTreeMap<(usize, u64), Scored> = BTreeMap::new();
    for (order, d) in kept.iter().enumerate() {
        det_by_key.entry((d.class_id, d.image_id)).or_default().push((d.score, d.bbox, order));
    }

    let thresholds = iou_thresholds();
    let mut per_class = BTreeMap::new();
    for class in 0..num_classes {
        let num_gt: usize = gt_by_key.range((class, 0)..=(class, u64::MAX)).map(|(_, v)| v.len()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut aps = Vec::with_capacity(thresholds.len());
        for &thr in &thresholds {
            // (score, global order, is_tp)
            let mut flags: Vec<(f64, usize, bool)> = Vec::new();
            for ((_, image), dets) in det_by_key.range((class, 0)..=(class, u64::MAX)) {
                let empty = Vec::new();
                let gt_boxes = gt_by_key.get(&(class, *image)).unwrap_or(&empty);
                let mut matched = vec![false; gt_boxes.len()];
                let mut sorted = dets.clone();
                sorted.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
                for (score, bbox, order) in sorted {
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, gb) in gt_boxes.iter().enumerate() {
                        if matched[gi] {
                            continue;
                        }
                        let v = iou(&bbox, gb);
                        if v >= thr && best.is_none_or(|(_, b)| v > b) {
                            best = Some((gi, v));
                        }
                    }
                    if let Some((gi, _)) = best {
                        matched[gi] = true;
                    }
                    flags.push((score, order, best.is_some()));
                }
            }
            flags.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let tp: Vec<bool> = flags.iter().map(|f| f.2).collect();
            aps.push(interpolated_ap(&tp, num_gt));
        }
        per_class.insert(class, ClassAp { ap: aps.iter().sum::<f64>() / aps.len() as f64, ap50: aps[0], num_gt });
    }

    let (map, map50) = if per_class.is_empty() {
        (0.0, 0.0)
    } else {
        let n = per_class.len() as f64;
        (per_class.values().map(|c| c.ap).sum::<f64>() / n, per_class.values().map(|c| c.ap50).sum::<f64>() / n)
    };
    Ok(MapResult { map, map50, per_class })
}
