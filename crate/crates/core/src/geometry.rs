//! Box arithmetic, overlap measures and the anchor-point grid.
//!
//! Boxes are continuous pixel `xyxy` everywhere inside the crate; `xywh` and
//! `cxcywh` only show up at file boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `x1 <= x2`, `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// Builds a box from COCO `[x, y, w, h]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    /// Strict containment of a point (on-edge points are outside).
    pub fn contains_strict(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(self.x1.clamp(0.0, width), self.y1.clamp(0.0, height), self.x2.clamp(0.0, width), self.y2.clamp(0.0, height))
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Smallest box covering both.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox::new(self.x1.min(other.x1), self.y1.min(other.y1), self.x2.max(other.x2), self.y2.max(other.y2))
    }
}

/// Ground-truth box with its category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub class_id: usize,
}

impl LabeledBox {
    pub fn new(bbox: BBox, class_id: usize) -> Self {
        LabeledBox { bbox, class_id }
    }
}

/// A prediction location at the center of a feature-map cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorPoint {
    pub cx: f64,
    pub cy: f64,
    pub stride: f64,
    pub level: usize,
}

/// Point-to-side distances in units of the anchor stride.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DistanceTarget {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl DistanceTarget {
    pub fn new(l: f64, t: f64, r: f64, b: f64) -> Self {
        DistanceTarget { l, t, r, b }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        DistanceTarget::new(v[0], v[1], v[2], v[3])
    }

    /// Distances from `p` to the sides of `gt`, negative components clamped
    /// to zero. Used for positives that came from the center prior and may
    /// lie outside their box.
    pub fn clamped(p: &AnchorPoint, gt: &BBox) -> Self {
        let d = signed_distances(p, gt);
        DistanceTarget::new(d[0].max(0.0), d[1].max(0.0), d[2].max(0.0), d[3].max(0.0))
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Generalized IoU: `iou - (enclosing - union) / enclosing`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let enclosing = a.enclosing(b).area();
    if enclosing <= 0.0 {
        iou
    } else {
        iou - (enclosing - union) / enclosing
    }
}

/// GIoU together with its partial derivatives with respect to the
/// coordinates `[x1, y1, x2, y2]` of `pred`.
pub fn giou_with_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let (pw, ph) = (pred.width().max(0.0), pred.height().max(0.0));
    let area_p = pw * ph;
    let area_g = gt.area();

    let ix1 = pred.x1.max(gt.x1);
    let iy1 = pred.y1.max(gt.y1);
    let ix2 = pred.x2.min(gt.x2);
    let iy2 = pred.y2.min(gt.y2);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let overlapping = iw > 0.0 && ih > 0.0;
    let inter = if overlapping { iw * ih } else { 0.0 };
    let union = area_p + area_g - inter;

    let ex1 = pred.x1.min(gt.x1);
    let ey1 = pred.y1.min(gt.y1);
    let ex2 = pred.x2.max(gt.x2);
    let ey2 = pred.y2.max(gt.y2);
    let ew = ex2 - ex1;
    let eh = ey2 - ey1;
    let enclosing = ew * eh;

    // d(area_p)/d[x1, y1, x2, y2]
    let d_area = if pw > 0.0 && ph > 0.0 { [-ph, -pw, ph, pw] } else { [0.0; 4] };
    let d_inter = if overlapping {
        [
            if pred.x1 > gt.x1 { -ih } else { 0.0 },
            if pred.y1 > gt.y1 { -iw } else { 0.0 },
            if pred.x2 < gt.x2 { ih } else { 0.0 },
            if pred.y2 < gt.y2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let d_enc = [
        if pred.x1 < gt.x1 { -eh } else { 0.0 },
        if pred.y1 < gt.y1 { -ew } else { 0.0 },
        if pred.x2 > gt.x2 { eh } else { 0.0 },
        if pred.y2 > gt.y2 { ew } else { 0.0 },
    ];

    let mut value = 0.0;
    let mut grad = [0.0; 4];
    if union > 0.0 {
        value += inter / union;
        for k in 0..4 {
            let d_union = d_area[k] - d_inter[k];
            grad[k] += (d_inter[k] * union - inter * d_union) / (union * union);
        }
    }
    if enclosing > 0.0 {
        // -(C - U)/C = U/C - 1
        value += union / enclosing - 1.0;
        for k in 0..4 {
            let d_union = d_area[k] - d_inter[k];
            grad[k] += (d_union * enclosing - union * d_enc[k]) / (enclosing * enclosing);
        }
    }
    (value, grad)
}

/// Cell-center points for every level, level-major and row-major within a
/// level.
pub fn make_grid(level_shapes: &[(usize, usize)], strides: &[f64]) -> Result<Vec<AnchorPoint>> {
    if level_shapes.len() != strides.len() {
        return Err(Error::InvalidArgument(format!("{} level shapes but {} strides", level_shapes.len(), strides.len())));
    }
    if strides.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!("strides must be strictly increasing, got {strides:?}")));
    }
    let total: usize = level_shapes.iter().map(|(h, w)| h * w).sum();
    let mut points = Vec::with_capacity(total);
    for (level, (&(h, w), &stride)) in level_shapes.iter().zip(strides).enumerate() {
        for i in 0..h {
            for j in 0..w {
                points.push(AnchorPoint { cx: (j as f64 + 0.5) * stride, cy: (i as f64 + 0.5) * stride, stride, level });
            }
        }
    }
    Ok(points)
}

/// `[l, t, r, b]` in stride units; components are negative when the point
/// lies outside the box.
pub fn signed_distances(p: &AnchorPoint, gt: &BBox) -> [f64; 4] {
    [(p.cx - gt.x1) / p.stride, (p.cy - gt.y1) / p.stride, (gt.x2 - p.cx) / p.stride, (gt.y2 - p.cy) / p.stride]
}

/// Regression target of `p` for `gt`. The point must lie strictly inside.
pub fn encode_distances(p: &AnchorPoint, gt: &BBox) -> Result<DistanceTarget> {
    if !gt.contains_strict(p.cx, p.cy) {
        return Err(Error::Precondition(format!("point ({}, {}) is not strictly inside box {:?}", p.cx, p.cy, gt)));
    }
    Ok(DistanceTarget::from_array(signed_distances(p, gt)))
}

pub fn decode_distances(p: &AnchorPoint, d: &DistanceTarget) -> BBox {
    BBox::new(p.cx - d.l * p.stride, p.cy - d.t * p.stride, p.cx + d.r * p.stride, p.cy + d.b * p.stride)
}

/// Serializes a box as `[x1, y1, x2, y2]`.
pub mod xyxy {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::BBox;

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq([b.x1, b.y1, b.x2, b.y2])
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        Ok(BBox::new(x1, y1, x2, y2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts unit pixels covered by integer-coordinate boxes.
    fn raster_iou(a: &BBox, b: &BBox) -> f64 {
        let (lo, hi) = (a.x1.min(b.x1).min(a.y1).min(b.y1) as i64, a.x2.max(b.x2).max(a.y2).max(b.y2) as i64);
        let mut inter = 0u64;
        let mut union = 0u64;
        for y in lo..hi {
            for x in lo..hi {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let ina = px > a.x1 && px < a.x2 && py > a.y1 && py < a.y2;
                let inb = px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2;
                inter += (ina && inb) as u64;
                union += (ina || inb) as u64;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    fn raster_area(bx: &BBox) -> f64 {
        raster_iou(bx, bx) * bx.area()
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        let expected = raster_iou(&a, &b);
        assert!((expected - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_area_boxes_have_zero_iou() {
        let p = BBox::new(3.0, 3.0, 3.0, 3.0);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &BBox::new(0.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a), 1.0);

        let b = BBox::new(2.0, 0.0, 3.0, 1.0);
        // union 2 pixels, enclosing 3 pixels, no overlap
        let enc = raster_area(&a.enclosing(&b));
        let union = raster_area(&a) + raster_area(&b);
        let oracle = 0.0 - (enc - union) / enc;
        assert!((oracle + 1.0 / 3.0).abs() < 1e-12);
        assert!((giou(&a, &b) - oracle).abs() < 1e-12);

        let far = BBox::new(99.0, 99.0, 100.0, 100.0);
        let oracle = -(10000.0 - 2.0) / 10000.0;
        assert!((giou(&a, &far) - oracle).abs() < 1e-12);
        assert!((giou(&a, &far) + 0.9998).abs() < 1e-12);
    }

    #[test]
    fn grid_examples() {
        let g = make_grid(&[(1, 1)], &[8.0]).unwrap();
        assert_eq!(g, vec![AnchorPoint { cx: 4.0, cy: 4.0, stride: 8.0, level: 0 }]);
        let g = make_grid(&[(2, 2)], &[8.0]).unwrap();
        let centers: Vec<_> = g.iter().map(|p| (p.cx, p.cy)).collect();
        assert_eq!(centers, vec![(4.0, 4.0), (12.0, 4.0), (4.0, 12.0), (12.0, 12.0)]);
        let g = make_grid(&[(1, 1), (1, 1)], &[8.0, 16.0]).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!((g[0].level, g[1].level), (0, 1));
        assert_eq!(g[1].cx, 8.0);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(make_grid(&[(1, 1)], &[8.0, 16.0]).is_err());
        assert!(make_grid(&[(1, 1), (1, 1)], &[16.0, 8.0]).is_err());
    }

    #[test]
    fn encode_decode_examples() {
        let p = AnchorPoint { cx: 8.0, cy: 8.0, stride: 8.0, level: 0 };
        let gt = BBox::new(0.0, 0.0, 16.0, 16.0);
        assert_eq!(encode_distances(&p, &gt).unwrap(), DistanceTarget::new(1.0, 1.0, 1.0, 1.0));
        assert_eq!(decode_distances(&p, &DistanceTarget::new(1.0, 1.0, 1.0, 1.0)), gt);
        assert_eq!(decode_distances(&p, &DistanceTarget::default()), BBox::new(8.0, 8.0, 8.0, 8.0));

        let q = AnchorPoint { cx: 12.0, cy: 4.0, stride: 8.0, level: 0 };
        let d = encode_distances(&q, &gt).unwrap();
        assert_eq!(d, DistanceTarget::new(1.5, 0.5, 0.5, 1.5));
        assert_eq!(decode_distances(&q, &d), gt);
    }

    #[test]
    fn encode_rejects_outside_point() {
        let p = AnchorPoint { cx: 20.0, cy: 8.0, stride: 8.0, level: 0 };
        let err = encode_distances(&p, &BBox::new(0.0, 0.0, 16.0, 16.0)).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let pred = BBox::new(1.3, 2.1, 7.7, 9.4);
        let gt = BBox::new(2.2, 0.5, 9.1, 6.6);
        let (_, grad) = giou_with_grad(&pred, &gt);
        let h = 1e-6;
        for k in 0..4 {
            let mut c = [pred.x1, pred.y1, pred.x2, pred.y2];
            c[k] += h;
            let up = giou(&BBox::new(c[0], c[1], c[2], c[3]), &gt);
            c[k] -= 2.0 * h;
            let down = giou(&BBox::new(c[0], c[1], c[2], c[3]), &gt);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6, "coord {k}: fd {fd} vs {}", grad[k]);
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.0..40.0f64, 0.0..40.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    fn arb_int_box() -> impl Strategy<Value = BBox> {
        (0i32..20, 0i32..20, 1i32..12, 1i32..12)
            .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
        }

        #[test]
        fn giou_bounded_by_iou(a in arb_box(), b in arb_box()) {
            let g = giou(&a, &b);
            prop_assert!(g <= iou(&a, &b) + 1e-9);
            let loss = 1.0 - g;
            prop_assert!((0.0..2.0).contains(&loss));
        }

        #[test]
        fn iou_matches_raster_oracle(a in arb_int_box(), b in arb_int_box()) {
            prop_assert!((iou(&a, &b) - raster_iou(&a, &b)).abs() < 1e-6);
        }

        #[test]
        fn encode_decode_round_trip(
            gt in (0.0..100.0f64, 0.0..100.0f64, 1.0..80.0f64, 1.0..80.0f64),
            fx in 0.01..0.99f64,
            fy in 0.01..0.99f64,
            level in 0usize..4,
        ) {
            let bx = BBox::new(gt.0, gt.1, gt.0 + gt.2, gt.1 + gt.3);
            let stride = 8.0 * (1u32 << level) as f64;
            let p = AnchorPoint { cx: bx.x1 + fx * gt.2, cy: bx.y1 + fy * gt.3, stride, level };
            let d = encode_distances(&p, &bx).unwrap();
            prop_assert!(d.as_array().iter().all(|&v| v >= 0.0));
            let back = decode_distances(&p, &d);
            prop_assert!((back.x1 - bx.x1).abs() < 1e-6);
            prop_assert!((back.y1 - bx.y1).abs() < 1e-6);
            prop_assert!((back.x2 - bx.x2).abs() < 1e-6);
            prop_assert!((back.y2 - bx.y2).abs() < 1e-6);
        }
    }
}
