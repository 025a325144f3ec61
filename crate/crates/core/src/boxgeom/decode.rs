use crate::error::{config_err, Result};
use crate::tensor::sigmoid;
use crate::tensor::Tensor;

use super::BBox;

/// Log-scale clamp applied to `tw`/`th` so decoded sizes stay finite and positive.
pub(crate) const MAX_LOG_SCALE: f64 = 10.0;

/// Channel layout of one detection head: for each of `anchors` priors,
/// `tx, ty, tw, th, objectness, class logits...`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub anchors: usize,
    pub classes: usize,
}

impl HeadLayout {
    pub fn new(classes: usize) -> Self {
        HeadLayout { anchors: 3, classes }
    }

    pub fn per_anchor(&self) -> usize {
        5 + self.classes
    }

    pub fn channels(&self) -> usize {
        self.anchors * self.per_anchor()
    }

    /// Flat index of field `k` for anchor `a` at cell `(i, j)` of batch item `n`.
    pub fn index(&self, grid: (usize, usize), n: usize, a: usize, k: usize, i: usize, j: usize) -> usize {
        let (gh, gw) = grid;
        (((n * self.channels()) + a * self.per_anchor() + k) * gh + i) * gw + j
    }
}

pub(crate) fn clamp_log(t: f64) -> f64 {
    t.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE)
}

/// Decodes one cell/anchor: center offsets through a sigmoid, sizes through
/// an exponential of the anchor.
pub(crate) fn decode_one(t: [f64; 4], cell: (usize, usize), anchor: (f64, f64), stride: f64) -> BBox {
    let (i, j) = cell;
    BBox::new(
        (sigmoid(t[0]) + j as f64) * stride,
        (sigmoid(t[1]) + i as f64) * stride,
        anchor.0 * clamp_log(t[2]).exp(),
        anchor.1 * clamp_log(t[3]).exp(),
    )
}

/// Decodes a raw head tensor `N × anchors·(5+classes) × G × G` into one box
/// list per batch item. Every box carries `score = σ(obj)·σ(best class)`.
pub fn decode_head(raw: &Tensor, anchors: &[(f64, f64)], stride: f64, layout: HeadLayout) -> Result<Vec<Vec<BBox>>> {
    let (n, c, gh, gw) = raw.dims4()?;
    if c != layout.channels() {
        return Err(config_err!(
            "head has {c} channels, expected {} = {}·(5+{})",
            layout.channels(),
            layout.anchors,
            layout.classes
        ));
    }
    if anchors.len() != layout.anchors {
        return Err(config_err!("head expects {} anchors, got {}", layout.anchors, anchors.len()));
    }
    let d = raw.data();
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let mut boxes = Vec::with_capacity(layout.anchors * gh * gw);
        for (a, &anchor) in anchors.iter().enumerate() {
            for i in 0..gh {
                for j in 0..gw {
                    let at = |k| d[layout.index((gh, gw), b, a, k, i, j)];
                    let bx = decode_one([at(0), at(1), at(2), at(3)], (i, j), anchor, stride);
                    let obj = sigmoid(at(4));
                    let (mut best, mut best_p) = (0, f64::NEG_INFINITY);
                    for k in 0..layout.classes {
                        let p = sigmoid(at(5 + k));
                        if p > best_p {
                            best = k;
                            best_p = p;
                        }
                    }
                    boxes.push(bx.with_score(obj * best_p).with_class(best));
                }
            }
        }
        out.push(boxes);
    }
    Ok(out)
}

/// Inverse of the decode map for a box whose center lies in `cell`.
pub fn encode_box(b: &BBox, cell: (usize, usize), anchor: (f64, f64), stride: f64) -> [f64; 4] {
    let logit = |p: f64| {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        (p / (1.0 - p)).ln()
    };
    [
        logit(b.cx / stride - cell.1 as f64),
        logit(b.cy / stride - cell.0 as f64),
        (b.w / anchor.0).ln(),
        (b.h / anchor.1).ln(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(fill: f64) -> Tensor {
        Tensor::full(&[1, 18, 2, 2], fill)
    }

    #[test]
    fn zero_logits_decode_to_anchor_at_cell_center() {
        let anchors = [(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)];
        let boxes = decode_head(&head(0.0), &anchors, 8.0, HeadLayout::new(1)).unwrap();
        let b = boxes[0][0];
        assert_eq!((b.cx, b.cy, b.w, b.h), (4.0, 4.0, 10.0, 13.0));
        assert_eq!(b.score, Some(0.25));
    }

    #[test]
    fn very_negative_objectness_scores_zero() {
        let mut raw = head(0.0);
        raw.data_mut().fill(-800.0);
        let anchors = [(10.0, 13.0); 3];
        let boxes = decode_head(&raw, &anchors, 8.0, HeadLayout::new(1)).unwrap();
        assert!(boxes[0].iter().all(|b| b.score.unwrap() < 1e-300 && b.w > 0.0 && b.h > 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let raw = Tensor::zeros(&[1, 17, 2, 2]);
        assert!(decode_head(&raw, &[(1.0, 1.0); 3], 8.0, HeadLayout::new(1)).is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let b = BBox::new(37.3, 21.9, 44.0, 17.5);
        let cell = ((21.9f64 / 16.0) as usize, (37.3f64 / 16.0) as usize);
        let t = encode_box(&b, cell, (30.0, 61.0), 16.0);
        let back = decode_one(t, cell, (30.0, 61.0), 16.0);
        for (x, y) in [(b.cx, back.cx), (b.cy, back.cy), (b.w, back.w), (b.h, back.h)] {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}
