//! Box geometry, IoU-family measures, decoding, target assignment, the
//! training loss and DIoU-NMS.

mod assign;
mod decode;
mod loss;
mod nms;

pub use assign::{assign_targets, shape_iou, Assignment, GridSpec};
pub use decode::{decode_head, encode_box, HeadLayout};
pub use loss::{giou_loss_grad, total_loss, LossBreakdown, LossWeights};
pub use nms::{diou, diou_nms, NMS_DIOU_THRESHOLD};

use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixels, stored as center and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: Option<f64>,
    pub class: Option<usize>,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            cx,
            cy,
            w,
            h,
            score: None,
            class: None,
        }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn with_class(mut self, class: usize) -> Self {
        self.class = Some(class);
        self
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn scaled(&self, k: f64) -> BBox {
        BBox {
            cx: self.cx * k,
            cy: self.cy * k,
            w: self.w * k,
            h: self.h * k,
            ..*self
        }
    }

    fn intersection(&self, other: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        iw * ih
    }

    /// Smallest box containing both.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        BBox::from_corners(ax1.min(bx1), ay1.min(by1), ax2.max(bx2), ay2.max(by2))
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU - (|C| - |A∪B|) / |C|` with `C` the enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let c = a.enclosing(b).area();
    if union <= 0.0 || c <= 0.0 {
        return 0.0;
    }
    inter / union - (c - union) / c
}

pub fn giou_loss(a: &BBox, b: &BBox) -> f64 {
    1.0 - giou(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        let b = BBox::new(1.0, 0.5, 1.0, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&BBox::new(0.0, 0.0, 0.0, 0.0), &BBox::new(0.0, 0.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        assert_eq!(giou_loss(&a, &a), 0.0);
        let b = BBox::new(3.5, 0.5, 1.0, 1.0);
        assert!((giou(&a, &b) - (-0.5)).abs() < 1e-15);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounds_giou(a in arb_box(), b in arb_box()) {
            prop_assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-15);
            prop_assert!(giou(&a, &b) <= iou(&a, &b) + 1e-15);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            let g = giou(&a, &b);
            prop_assert!(g > -1.0 && g <= 1.0);
        }

        #[test]
        fn scale_invariance(a in arb_box(), b in arb_box(), k in 0.01..100.0f64) {
            prop_assert!((iou(&a, &b) - iou(&a.scaled(k), &b.scaled(k))).abs() < 1e-12);
            prop_assert!((giou(&a, &b) - giou(&a.scaled(k), &b.scaled(k))).abs() < 1e-12);
        }

        #[test]
        fn giou_equals_iou_when_nested(a in arb_box(), f in 0.1..1.0f64) {
            let inner = BBox::new(a.cx, a.cy, a.w * f, a.h * f);
            prop_assert!((giou(&a, &inner) - iou(&a, &inner)).abs() < 1e-12);
        }
    }
}
