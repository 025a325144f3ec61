use crate::anchors::AnchorSet;
use crate::error::{config_err, Error, Result};

use super::BBox;

/// IoU of two boxes of the given sizes sharing a center.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Grid geometry of one detection scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub stride: f64,
}

/// The single positive slot for one ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    /// (row, column).
    pub cell: (usize, usize),
    /// Anchor index within its scale, 0..3.
    pub anchor: usize,
    pub scale: usize,
    pub target: BBox,
    pub objectness: f64,
    pub class: usize,
}

/// Picks for every ground truth the (scale, anchor) of best shape-IoU and
/// the cell containing its center. Ties go to the lower global anchor index.
pub fn assign_targets(gts: &[BBox], anchors: &AnchorSet, grids: &[GridSpec], record: &str) -> Result<Vec<Assignment>> {
    let per = anchors.per_scale();
    if grids.len() != anchors.num_scales() {
        return Err(config_err!(
            "{} grids given for {} anchor scales",
            grids.len(),
            anchors.num_scales()
        ));
    }
    let mut out = Vec::with_capacity(gts.len());
    for (k, gt) in gts.iter().enumerate() {
        if !(gt.w > 0.0 && gt.h > 0.0) {
            return Err(Error::Data(format!(
                "{record}: box {k} has zero area ({} x {})",
                gt.w, gt.h
            )));
        }
        let mut best = 0;
        let mut best_iou = f64::NEG_INFINITY;
        for (idx, &a) in anchors.pairs().iter().enumerate() {
            let v = shape_iou((gt.w, gt.h), a);
            if v > best_iou {
                best = idx;
                best_iou = v;
            }
        }
        let (scale, anchor) = (best / per, best % per);
        let g = grids[scale];
        let col = ((gt.cx / g.stride).floor().max(0.0) as usize).min(g.width - 1);
        let row = ((gt.cy / g.stride).floor().max(0.0) as usize).min(g.height - 1);
        out.push(Assignment {
            cell: (row, col),
            anchor,
            scale,
            target: *gt,
            objectness: 1.0,
            class: gt.class.unwrap_or(0),
        });
    }
    Ok(out)
}
