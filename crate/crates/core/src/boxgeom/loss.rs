use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{sigmoid, softplus, Tape, Tensor, Var};

use super::assign::Assignment;
use super::decode::{decode_one, HeadLayout, MAX_LOG_SCALE};
use super::BBox;

/// GIoU loss `1 - giou(a, b)` and its gradient with respect to
/// `(a.cx, a.cy, a.w, a.h)`. Degenerate pairs give loss 1 and zero gradient.
pub fn giou_loss_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    let (iw, ih, overlap) = if iw > 0.0 && ih > 0.0 { (iw, ih, true) } else { (0.0, 0.0, false) };
    let inter = iw * ih;
    let (aw, ah) = (ax2 - ax1, ay2 - ay1);
    let union = aw * ah + (bx2 - bx1) * (by2 - by1) - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let c = cw * ch;
    if union <= 0.0 || c <= 0.0 {
        return (1.0, [0.0; 4]);
    }
    let giou = inter / union - (c - union) / c;

    // partials with respect to a's corners: x1, x2, y1, y2
    let mut d_inter = [0.0; 4];
    if overlap {
        if ax1 > bx1 {
            d_inter[0] = -ih;
        }
        if ax2 < bx2 {
            d_inter[1] = ih;
        }
        if ay1 > by1 {
            d_inter[2] = -iw;
        }
        if ay2 < by2 {
            d_inter[3] = iw;
        }
    }
    let d_area = [-ah, ah, -aw, aw];
    let mut d_c = [0.0; 4];
    if ax1 < bx1 {
        d_c[0] = -ch;
    }
    if ax2 > bx2 {
        d_c[1] = ch;
    }
    if ay1 < by1 {
        d_c[2] = -cw;
    }
    if ay2 > by2 {
        d_c[3] = cw;
    }
    let mut d = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let dg = d_inter[k] / union - inter * d_union / (union * union) + d_union / c - union * d_c[k] / (c * c);
        d[k] = -dg;
    }
    let grad = [d[0] + d[1], d[2] + d[3], (d[1] - d[0]) / 2.0, (d[3] - d[2]) / 2.0];
    (1.0 - giou, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(rename = "box")]
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bbox: 0.05,
            obj: 1.0,
            cls: 0.5,
        }
    }
}

/// Weighted terms of the training loss; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub bbox: f64,
    pub obj: f64,
    pub cls: f64,
    pub total: f64,
    pub positives: usize,
}

fn bce(logit: f64, target: f64) -> f64 {
    softplus(logit) - logit * target
}

/// Loss value and per-head gradients, computed in closed form.
pub(crate) fn loss_and_grads(
    heads: &[&Tensor],
    layout: HeadLayout,
    anchors: &AnchorSet,
    strides: &[f64],
    targets: &[Vec<Assignment>],
    weights: LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    if heads.len() != anchors.num_scales() || strides.len() != heads.len() {
        return Err(config_err!(
            "loss: {} heads, {} strides, {} anchor scales",
            heads.len(),
            strides.len(),
            anchors.num_scales()
        ));
    }
    if anchors.per_scale() != layout.anchors {
        return Err(config_err!(
            "loss: {} anchors per scale but the head layout has {}",
            anchors.per_scale(),
            layout.anchors
        ));
    }
    let mut dims = Vec::with_capacity(heads.len());
    for h in heads {
        let (n, c, gh, gw) = h.dims4()?;
        if c != layout.channels() {
            return Err(config_err!("loss: head has {c} channels, expected {}", layout.channels()));
        }
        if n != targets.len() {
            return Err(shape_err!("loss: batch of {n} but {} target lists", targets.len()));
        }
        dims.push((gh, gw));
    }
    let n = targets.len();

    // objectness targets, one slot per (scale, item, anchor, cell)
    let mut obj_target: Vec<Vec<f64>> = dims.iter().map(|&(gh, gw)| vec![0.0; n * layout.anchors * gh * gw]).collect();
    let slot = |s: usize, b: usize, a: usize, i: usize, j: usize| {
        let (gh, gw) = dims[s];
        ((b * layout.anchors + a) * gh + i) * gw + j
    };
    let mut positives = Vec::new();
    for (b, list) in targets.iter().enumerate() {
        for t in list {
            if t.scale >= heads.len() || t.anchor >= layout.anchors || t.class >= layout.classes {
                return Err(config_err!(
                    "loss: assignment scale {} anchor {} class {} out of range",
                    t.scale,
                    t.anchor,
                    t.class
                ));
            }
            let (gh, gw) = dims[t.scale];
            if t.cell.0 >= gh || t.cell.1 >= gw {
                return Err(shape_err!("loss: cell {:?} outside a {gh}x{gw} grid", t.cell));
            }
            obj_target[t.scale][slot(t.scale, b, t.anchor, t.cell.0, t.cell.1)] = t.objectness;
            positives.push((b, *t));
        }
    }

    let mut grads: Vec<Tensor> = heads.iter().map(|h| Tensor::zeros(h.shape())).collect();
    let mut out = LossBreakdown {
        positives: positives.len(),
        ..Default::default()
    };

    let cells: usize = obj_target.iter().map(Vec::len).sum();
    let k_obj = weights.obj / cells as f64;
    for (s, h) in heads.iter().enumerate() {
        let (gh, gw) = dims[s];
        let (d, g) = (h.data(), grads[s].data_mut());
        for b in 0..n {
            for a in 0..layout.anchors {
                for i in 0..gh {
                    for j in 0..gw {
                        let idx = layout.index((gh, gw), b, a, 4, i, j);
                        let y = obj_target[s][slot(s, b, a, i, j)];
                        out.obj += k_obj * bce(d[idx], y);
                        g[idx] += k_obj * (sigmoid(d[idx]) - y);
                    }
                }
            }
        }
    }

    if positives.is_empty() {
        log::warn!("loss: batch has no positive assignments; box and class terms are zero");
    } else {
        let k_box = weights.bbox / positives.len() as f64;
        let k_cls = weights.cls / (positives.len() * layout.classes) as f64;
        for (b, t) in &positives {
            let s = t.scale;
            let grid = dims[s];
            let stride = strides[s];
            let (d, g) = (heads[s].data(), grads[s].data_mut());
            let at = |k| layout.index(grid, *b, t.anchor, k, t.cell.0, t.cell.1);
            let raw = [d[at(0)], d[at(1)], d[at(2)], d[at(3)]];
            let pred = decode_one(raw, t.cell, anchors.scale(s)[t.anchor], stride);
            let (l, dl) = giou_loss_grad(&pred, &t.target);
            out.bbox += k_box * l;
            for k in 0..2 {
                let sg = sigmoid(raw[k]);
                g[at(k)] += k_box * dl[k] * stride * sg * (1.0 - sg);
            }
            let size = [pred.w, pred.h];
            for k in 0..2 {
                if raw[2 + k].abs() < MAX_LOG_SCALE {
                    g[at(2 + k)] += k_box * dl[2 + k] * size[k];
                }
            }
            for c in 0..layout.classes {
                let y = if c == t.class { 1.0 } else { 0.0 };
                let x = d[at(5 + c)];
                out.cls += k_cls * bce(x, y);
                g[at(5 + c)] += k_cls * (sigmoid(x) - y);
            }
        }
    }
    out.total = out.bbox + out.obj + out.cls;
    Ok((out, grads))
}

/// Adds the detection loss over `heads` (one per scale, smallest stride
/// first) to the tape. `targets` holds the assignments of each batch item.
pub fn total_loss(
    tape: &mut Tape,
    heads: &[Var],
    layout: HeadLayout,
    anchors: &AnchorSet,
    strides: &[f64],
    targets: &[Vec<Assignment>],
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let values: Vec<&Tensor> = heads.iter().map(|&v| tape.value(v)).collect();
    let (parts, grads) = loss_and_grads(&values, layout, anchors, strides, targets, weights)?;
    let v = tape.scalar_fn(heads, parts.total, grads)?;
    Ok((v, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxgeom::{encode_box, giou_loss};
    use crate::tensor::gradcheck::{check_gradients, rel_error, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
        BBox::new(
            rng.gen_range(0.0..40.0),
            rng.gen_range(0.0..40.0),
            rng.gen_range(2.0..30.0),
            rng.gen_range(2.0..30.0),
        )
    }

    #[test]
    fn giou_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 100 {
            let (a, b) = (rand_box(&mut rng), rand_box(&mut rng));
            let (l, g) = giou_loss_grad(&a, &b);
            assert!((l - giou_loss(&a, &b)).abs() < 1e-12);
            let h = FD_STEP;
            for k in 0..4 {
                let bump = |delta: f64| {
                    let mut p = [a.cx, a.cy, a.w, a.h];
                    p[k] += delta;
                    giou_loss(&BBox::new(p[0], p[1], p[2], p[3]), &b)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let err = rel_error(g[k], numeric);
                assert!(err < 1e-4, "pair {a:?} {b:?} coord {k}: {} vs {numeric}", g[k]);
            }
            checked += 1;
        }
    }

    fn toy_setup() -> (AnchorSet, Vec<f64>, HeadLayout) {
        (AnchorSet::paper(), vec![8.0, 16.0, 32.0], HeadLayout::new(1))
    }

    #[test]
    fn loss_gradient_on_one_cell_heads() {
        let (anchors, strides, layout) = toy_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let heads: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(&[1, 18, 1, 1], |_| rng.gen_range(-1.5..1.5)))
            .collect();
        let targets = vec![vec![Assignment {
            cell: (0, 0),
            anchor: 1,
            scale: 0,
            target: BBox::new(5.0, 3.0, 14.0, 25.0),
            objectness: 1.0,
            class: 0,
        }]];
        let report = check_gradients(&heads, FD_STEP, |tape, vars| {
            Ok(total_loss(tape, vars, layout, &anchors, &strides, &targets, LossWeights::default())?.0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn zero_positives_leave_only_objectness() {
        let (anchors, strides, layout) = toy_setup();
        let heads: Vec<Tensor> = (0..3).map(|_| Tensor::full(&[2, 18, 2, 2], 0.3)).collect();
        let refs: Vec<&Tensor> = heads.iter().collect();
        let (parts, _) = loss_and_grads(&refs, layout, &anchors, &strides, &[vec![], vec![]], LossWeights::default()).unwrap();
        assert_eq!(parts.bbox, 0.0);
        assert_eq!(parts.cls, 0.0);
        assert_eq!(parts.total, parts.obj);
        assert!((parts.obj - bce(0.3, 0.0)).abs() < 1e-12);
    }

    #[test]
    fn matching_saturated_predictions_give_near_zero_loss() {
        let (anchors, strides, layout) = toy_setup();
        let target = BBox::new(13.0, 21.0, 17.0, 28.0);
        let t = Assignment {
            cell: (2, 1),
            anchor: 1,
            scale: 0,
            target,
            objectness: 1.0,
            class: 0,
        };
        let mut heads: Vec<Tensor> = (0..3).map(|s| Tensor::full(&[1, 18, 4 >> s, 4 >> s], -60.0)).collect();
        let raw = encode_box(&target, t.cell, anchors.scale(0)[1], 8.0);
        let grid = (4, 4);
        let d = heads[0].data_mut();
        for (k, v) in raw.iter().enumerate() {
            d[layout.index(grid, 0, 1, k, 2, 1)] = *v;
        }
        d[layout.index(grid, 0, 1, 4, 2, 1)] = 60.0;
        d[layout.index(grid, 0, 1, 5, 2, 1)] = 60.0;
        let refs: Vec<&Tensor> = heads.iter().collect();
        let (parts, _) = loss_and_grads(&refs, layout, &anchors, &strides, &[vec![t]], LossWeights::default()).unwrap();
        assert!(parts.total < 1e-9, "{parts:?}");
        assert_eq!(parts.positives, 1);
    }

    #[test]
    fn out_of_range_assignment_rejected() {
        let (anchors, strides, layout) = toy_setup();
        let heads: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(&[1, 18, 2, 2])).collect();
        let refs: Vec<&Tensor> = heads.iter().collect();
        let bad = Assignment {
            cell: (2, 0),
            anchor: 0,
            scale: 0,
            target: BBox::new(1.0, 1.0, 1.0, 1.0),
            objectness: 1.0,
            class: 0,
        };
        assert!(loss_and_grads(&refs, layout, &anchors, &strides, &[vec![bad]], LossWeights::default()).is_err());
    }
}
