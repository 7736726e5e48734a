//! Axis-aligned boxes in normalized image coordinates, overlap measures,
//! and pairwise non-maximum suppression over human-object predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box corners must satisfy x1 < x2 and y1 < y2, got ({x1}, {y1}, {x2}, {y2})")]
    EmptyBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("box coordinates must be finite and within [0, 1], got ({x1}, {y1}, {x2}, {y2})")]
    OutOfRange { x1: f64, y1: f64, x2: f64, y2: f64 },
}

/// Axis-aligned box `(x1, y1, x2, y2)` with corners in `[0, 1]` and strictly
/// positive area. Construction rejects anything else; downstream code may
/// rely on validity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

/// Serialization mirror of [`BBox`]; deserialization re-validates.
#[derive(Serialize, Deserialize)]
struct RawBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = GeometryError;
    fn try_from(r: RawBox) -> Result<Self, Self::Error> {
        BBox::new(r.x1, r.y1, r.x2, r.y2)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 }
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let coords = [x1, y1, x2, y2];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0 || *c > 1.0) {
            return Err(GeometryError::OutOfRange { x1, y1, x2, y2 });
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(GeometryError::EmptyBox { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// Clamps arbitrary corner predictions into a valid box. Corners are
    /// clipped to `[0, 1]` and degenerate extents widened by a hair so the
    /// validity invariant holds.
    pub fn clamped(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        const MIN_EXTENT: f64 = 1e-6;
        let fix = |lo: f64, hi: f64| {
            let lo = if lo.is_finite() { lo.clamp(0.0, 1.0 - MIN_EXTENT) } else { 0.0 };
            let hi = if hi.is_finite() { hi.clamp(lo + MIN_EXTENT, 1.0) } else { 1.0 };
            (lo, hi)
        };
        let (x1, x2) = fix(x1, x2);
        let (y1, y2) = fix(y1, y2);
        BBox { x1, y1, x2, y2 }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }
}

/// Intersection-over-union on raw corner quadruples. Callers must provide
/// positive-area corners; no `[0, 1]` range requirement.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    inter / union
}

/// Generalized IoU on raw corner quadruples: `iou - (enclose - union) / enclose`.
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    let ew = a[2].max(b[2]) - a[0].min(b[0]);
    let eh = a[3].max(b[3]) - a[1].min(b[1]);
    let enclose = ew * eh;
    inter / union - (enclose - union) / enclose
}

/// Intersection-over-union of two valid boxes, in `[0, 1]`; 0 exactly when
/// the interiors are disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_corners(a.corners(), b.corners())
}

/// Generalized IoU of two valid boxes, in `(-1, 1]`; never exceeds [`iou`].
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    giou_corners(a.corners(), b.corners())
}

/// Anything pairwise NMS can rank and suppress.
pub trait PairRecord {
    fn human_box(&self) -> &BBox;
    fn object_box(&self) -> &BBox;
    fn object_class(&self) -> usize;
    fn score(&self) -> f64;
}

/// Default suppression threshold for pair predictions.
pub const NMS_THRESHOLD: f64 = 0.6;

/// Pairwise non-maximum suppression.
///
/// Predictions are visited in descending score order (ties keep input
/// order). A prediction is dropped exactly when an already-kept,
/// higher-ranked prediction has the same object class and both its human
/// IoU and its object IoU against the candidate strictly exceed `thr`.
/// Output is ordered by descending score; the pass is idempotent.
pub fn pairwise_nms<T: PairRecord>(preds: Vec<T>, thr: f64) -> Vec<T> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score()
            .partial_cmp(&preds[a].score())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            preds[k].object_class() == preds[i].object_class()
                && iou(preds[k].human_box(), preds[i].human_box()) > thr
                && iou(preds[k].object_box(), preds[i].object_box()) > thr
        });
        if !suppressed {
            kept.push(i);
        }
    }

    let keep_set: std::collections::HashSet<usize> = kept.iter().copied().collect();
    let mut out: Vec<(usize, T)> =
        preds.into_iter().enumerate().filter(|(i, _)| keep_set.contains(i)).collect();
    out.sort_by_key(|(i, _)| kept.iter().position(|k| k == i).expect("kept index"));
    out.into_iter().map(|(_, t)| t).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[derive(Debug, Clone, PartialEq)]
    struct Pred {
        h: BBox,
        o: BBox,
        class: usize,
        score: f64,
    }

    impl PairRecord for Pred {
        fn human_box(&self) -> &BBox {
            &self.h
        }
        fn object_box(&self) -> &BBox {
            &self.o
        }
        fn object_class(&self) -> usize {
            self.class
        }
        fn score(&self) -> f64 {
            self.score
        }
    }

    #[test]
    fn construction_rejects_degenerate_and_out_of_range() {
        assert!(matches!(BBox::new(0.5, 0.0, 0.5, 1.0), Err(GeometryError::EmptyBox { .. })));
        assert!(matches!(BBox::new(0.6, 0.0, 0.4, 1.0), Err(GeometryError::EmptyBox { .. })));
        assert!(matches!(BBox::new(-0.1, 0.0, 0.5, 1.0), Err(GeometryError::OutOfRange { .. })));
        assert!(matches!(BBox::new(0.0, 0.0, 1.2, 1.0), Err(GeometryError::OutOfRange { .. })));
        assert!(matches!(
            BBox::new(f64::NAN, 0.0, 0.5, 1.0),
            Err(GeometryError::OutOfRange { .. })
        ));
        assert!(BBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn clamped_always_yields_a_valid_box() {
        for raw in [
            [-0.5, 0.3, 1.7, 0.3],
            [0.9, 0.9, 0.1, 0.1],
            [f64::NAN, 0.0, f64::INFINITY, 0.5],
        ] {
            let b = BBox::clamped(raw[0], raw[1], raw[2], raw[3]);
            assert!(BBox::new(b.x1(), b.y1(), b.x2(), b.y2()).is_ok(), "raw {raw:?} gave {b:?}");
        }
    }

    #[test]
    fn half_overlap_iou_is_half() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(0.5, 0.0, 1.0, 1.0)), 0.5);
    }

    #[test]
    fn identical_boxes_score_one() {
        let b = bx(0.2, 0.3, 0.7, 0.9);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(giou(&b, &b), 1.0);
    }

    #[test]
    fn touching_boxes_have_zero_iou_and_zero_giou() {
        // Abutting halves: empty intersection but the union tiles the
        // enclosing box, so the GIoU penalty vanishes too.
        let a = bx(0.0, 0.0, 0.5, 1.0);
        let b = bx(0.5, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &b), 0.0);
        assert_eq!(giou(&a, &b), 0.0);
    }

    #[test]
    fn distant_boxes_drive_giou_toward_minus_one() {
        // inter 0, union 0.02, enclose 1: giou = -(1 - 0.02) / 1 = -0.98.
        let a = bx(0.0, 0.0, 0.1, 0.1);
        let b = bx(0.9, 0.9, 1.0, 1.0);
        assert_eq!(iou(&a, &b), 0.0);
        assert!((giou(&a, &b) + 0.98).abs() < 1e-12);
    }

    #[test]
    fn giou_never_exceeds_iou() {
        let cases = [
            (bx(0.0, 0.0, 0.4, 0.4), bx(0.2, 0.2, 0.8, 0.8)),
            (bx(0.1, 0.1, 0.3, 0.9), bx(0.5, 0.2, 0.9, 0.4)),
            (bx(0.0, 0.0, 1.0, 1.0), bx(0.4, 0.4, 0.6, 0.6)),
        ];
        for (a, b) in cases {
            assert!(giou(&a, &b) <= iou(&a, &b) + 1e-15);
            assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-15, "iou must be symmetric");
        }
    }

    fn overlapping_pair(class: usize, score: f64) -> Pred {
        Pred { h: bx(0.1, 0.1, 0.5, 0.9), o: bx(0.55, 0.2, 0.9, 0.8), class, score }
    }

    #[test]
    fn duplicate_of_same_class_is_suppressed() {
        let kept = pairwise_nms(
            vec![overlapping_pair(2, 0.9), overlapping_pair(2, 0.8)],
            0.6,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn low_object_overlap_keeps_both() {
        let a = overlapping_pair(2, 0.9);
        let mut b = overlapping_pair(2, 0.8);
        b.o = bx(0.1, 0.1, 0.3, 0.3);
        let kept = pairwise_nms(vec![a, b], 0.6);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn different_classes_never_suppress_each_other() {
        let kept = pairwise_nms(
            vec![overlapping_pair(2, 0.9), overlapping_pair(3, 0.8)],
            0.6,
        );
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn threshold_is_strict() {
        // Both IoUs exactly at the threshold: kept.
        let a = Pred { h: bx(0.0, 0.0, 1.0, 1.0), o: bx(0.0, 0.0, 1.0, 1.0), class: 0, score: 0.9 };
        let b = Pred {
            h: bx(0.0, 0.0, 0.6, 1.0),
            o: bx(0.0, 0.0, 0.6, 1.0),
            class: 0,
            score: 0.5,
        };
        assert_eq!(iou(&a.h, &b.h), 0.6);
        let kept = pairwise_nms(vec![a, b], 0.6);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn output_sorted_by_descending_score_with_stable_ties() {
        let mut far = overlapping_pair(1, 0.7);
        far.h = bx(0.6, 0.55, 0.95, 0.95);
        far.o = bx(0.05, 0.55, 0.35, 0.95);
        let tie_first = overlapping_pair(4, 0.7);
        let preds = vec![far.clone(), tie_first.clone(), overlapping_pair(5, 0.9)];
        let kept = pairwise_nms(preds, 0.6);
        assert_eq!(kept.len(), 3);
        assert_eq!(kept[0].score, 0.9);
        // Equal scores keep their input order.
        assert_eq!(kept[1], far);
        assert_eq!(kept[2], tie_first);
    }

    #[test]
    fn nms_is_idempotent_on_a_dense_example() {
        let preds = vec![
            overlapping_pair(2, 0.95),
            overlapping_pair(2, 0.90),
            overlapping_pair(3, 0.85),
            overlapping_pair(2, 0.80),
            overlapping_pair(3, 0.75),
        ];
        let once = pairwise_nms(preds, 0.6);
        let twice = pairwise_nms(once.clone(), 0.6);
        assert_eq!(once, twice);
    }
}
