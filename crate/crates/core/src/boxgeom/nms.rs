use std::cmp::Ordering;

use super::{iou, BBox};

/// Default suppression threshold on DIoU.
pub const NMS_DIOU_THRESHOLD: f64 = 0.45;

/// Distance IoU: `IoU - ρ²/c²` where `ρ` is the distance between centers and
/// `c` the diagonal of the enclosing box.
pub fn diou(a: &BBox, b: &BBox) -> f64 {
    let enc = a.enclosing(b);
    let c2 = enc.w * enc.w + enc.h * enc.h;
    let rho2 = (a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2);
    if c2 <= 0.0 {
        return iou(a, b);
    }
    iou(a, b) - rho2 / c2
}

/// Descending score, then ascending input index.
pub(crate) fn score_order(boxes: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        let (si, sj) = (boxes[i].score.unwrap_or(0.0), boxes[j].score.unwrap_or(0.0));
        sj.partial_cmp(&si).unwrap_or(Ordering::Equal).then(i.cmp(&j))
    });
    order
}

/// Greedy DIoU non-maximum suppression.
///
/// Boxes scoring below `score_threshold` are dropped first. The remaining
/// boxes are visited by descending score; each kept box suppresses every later
/// candidate whose DIoU with it exceeds `threshold`. Output is in visit order.
pub fn diou_nms(boxes: &[BBox], threshold: f64, score_threshold: f64) -> Vec<BBox> {
    let candidates: Vec<BBox> = boxes
        .iter()
        .filter(|b| b.score.unwrap_or(0.0) >= score_threshold)
        .copied()
        .collect();
    let order = score_order(&candidates);
    let mut suppressed = vec![false; candidates.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(candidates[i]);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && diou(&candidates[i], &candidates[j]) > threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_box_kept() {
        let b = BBox::new(10.0, 10.0, 4.0, 4.0).with_score(0.7);
        assert_eq!(diou_nms(&[b], 0.45, 0.25), vec![b]);
        assert!(diou_nms(&[b], 0.45, 0.8).is_empty());
        assert!(diou_nms(&[], 0.45, 0.0).is_empty());
    }

    #[test]
    fn identical_boxes_keep_highest() {
        let a = BBox::new(10.0, 10.0, 4.0, 4.0).with_score(0.9);
        let b = BBox::new(10.0, 10.0, 4.0, 4.0).with_score(0.8);
        assert_eq!(diou(&a, &b), 1.0);
        assert_eq!(diou_nms(&[b, a], 0.5, 0.0), vec![a]);
    }

    /// Greedy NMS is not monotone in the threshold: a box that survives only
    /// at the higher threshold can suppress two boxes kept at the lower one.
    #[test]
    fn raising_threshold_can_shrink_kept_set() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).with_score(0.9);
        let b = BBox::new(4.0, 0.0, 10.0, 10.0).with_score(0.8);
        let c = BBox::new(4.0, -2.5, 10.0, 10.0).with_score(0.7);
        let d = BBox::new(4.0, 2.5, 10.0, 10.0).with_score(0.6);
        let (dab, dbc, dbd) = (diou(&a, &b), diou(&b, &c), diou(&b, &d));
        let lo = dab - 0.01;
        let hi = dab + 0.01;
        assert!(dbc > hi && dbd > hi, "{dab} {dbc} {dbd}");
        assert!(diou(&a, &c) < lo && diou(&a, &d) < lo && diou(&c, &d) < lo);
        assert_eq!(diou_nms(&[a, b, c, d], lo, 0.0).len(), 3);
        assert_eq!(diou_nms(&[a, b, c, d], hi, 0.0).len(), 2);
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<BBox>> {
        prop::collection::vec(
            (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64, 0.0..1.0f64),
            0..12,
        )
        .prop_map(|v| v.into_iter().map(|(x, y, w, h, s)| BBox::new(x, y, w, h).with_score(s)).collect())
    }

    proptest! {
        #[test]
        fn output_is_sorted_subset_with_separated_boxes(boxes in arb_boxes(), theta in 0.0..1.0f64) {
            let kept = diou_nms(&boxes, theta, 0.1);
            for w in kept.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            for k in &kept {
                prop_assert!(boxes.contains(k));
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(diou(a, b) <= theta);
                }
            }
            // every dropped candidate is covered by a higher-ranked kept box
            for b in boxes.iter().filter(|b| b.score.unwrap() >= 0.1 && !kept.contains(b)) {
                prop_assert!(kept.iter().any(|k| k.score >= b.score && diou(k, b) > theta));
            }
        }
    }
}
