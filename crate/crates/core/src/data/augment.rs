use std::str::FromStr;

use image::imageops;

use super::DatasetRecord;
use crate::boxgeom::BBox;
use crate::error::{config_err, Error};

/// Axis-aligned flips and clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentOp {
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::HFlip,
        AugmentOp::VFlip,
        AugmentOp::Rot90,
        AugmentOp::Rot180,
        AugmentOp::Rot270,
    ];

    pub fn inverse(self) -> AugmentOp {
        match self {
            AugmentOp::Rot90 => AugmentOp::Rot270,
            AugmentOp::Rot270 => AugmentOp::Rot90,
            op => op,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentOp::HFlip => "hflip",
            AugmentOp::VFlip => "vflip",
            AugmentOp::Rot90 => "rot90",
            AugmentOp::Rot180 => "rot180",
            AugmentOp::Rot270 => "rot270",
        }
    }

    /// Maps a box on a `width × height` image.
    pub fn apply_box(self, b: &BBox, width: f64, height: f64) -> BBox {
        let (cx, cy, w, h) = match self {
            AugmentOp::HFlip => (width - b.cx, b.cy, b.w, b.h),
            AugmentOp::VFlip => (b.cx, height - b.cy, b.w, b.h),
            AugmentOp::Rot90 => (height - b.cy, b.cx, b.h, b.w),
            AugmentOp::Rot180 => (width - b.cx, height - b.cy, b.w, b.h),
            AugmentOp::Rot270 => (b.cy, width - b.cx, b.h, b.w),
        };
        BBox { cx, cy, w, h, ..*b }
    }
}

impl FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| config_err!("unknown augmentation {s:?}"))
    }
}

/// Transforms pixels and boxes together. Exact (and exactly undone by
/// [`AugmentOp::inverse`]) for coordinates on the [`super::COORD_GRID`].
pub fn augment(rec: &DatasetRecord, op: AugmentOp) -> DatasetRecord {
    let image = match op {
        AugmentOp::HFlip => imageops::flip_horizontal(&rec.image),
        AugmentOp::VFlip => imageops::flip_vertical(&rec.image),
        AugmentOp::Rot90 => imageops::rotate90(&rec.image),
        AugmentOp::Rot180 => imageops::rotate180(&rec.image),
        AugmentOp::Rot270 => imageops::rotate270(&rec.image),
    };
    let (w, h) = (f64::from(rec.width()), f64::from(rec.height()));
    DatasetRecord {
        id: rec.id.clone(),
        image,
        boxes: rec.boxes.iter().map(|b| op.apply_box(b, w, h)).collect(),
        tags: rec.tags.clone(),
    }
}
