use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::DatasetRecord;
use crate::boxgeom::BBox;
use crate::error::{config_err, Result};

/// Gray level of the letterbox border.
pub const LETTERBOX_PAD: u8 = 114;

/// Per-axis scale and offset from source pixels to network-input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub scale_x: f64,
    pub scale_y: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub target: u32,
}

impl Letterbox {
    /// Geometry for fitting `width × height` into a `target` square.
    pub fn fit(width: u32, height: u32, target: u32) -> Self {
        let s = (f64::from(target) / f64::from(width)).min(f64::from(target) / f64::from(height));
        let nw = ((f64::from(width) * s).round() as u32).clamp(1, target);
        let nh = ((f64::from(height) * s).round() as u32).clamp(1, target);
        Letterbox {
            scale_x: f64::from(nw) / f64::from(width),
            scale_y: f64::from(nh) / f64::from(height),
            pad_x: f64::from((target - nw) / 2),
            pad_y: f64::from((target - nh) / 2),
            target,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.scale_x == 1.0 && self.scale_y == 1.0 && self.pad_x == 0.0 && self.pad_y == 0.0
    }

    pub fn forward(&self, b: &BBox) -> BBox {
        BBox {
            cx: b.cx * self.scale_x + self.pad_x,
            cy: b.cy * self.scale_y + self.pad_y,
            w: b.w * self.scale_x,
            h: b.h * self.scale_y,
            ..*b
        }
    }

    /// Maps a network-input box back to source pixels.
    pub fn inverse(&self, b: &BBox) -> BBox {
        BBox {
            cx: (b.cx - self.pad_x) / self.scale_x,
            cy: (b.cy - self.pad_y) / self.scale_y,
            w: b.w / self.scale_x,
            h: b.h / self.scale_y,
            ..*b
        }
    }
}

pub fn letterbox_image(img: &RgbImage, lb: &Letterbox) -> RgbImage {
    let nw = (f64::from(img.width()) * lb.scale_x).round() as u32;
    let nh = (f64::from(img.height()) * lb.scale_y).round() as u32;
    if lb.is_identity() && img.width() == lb.target && img.height() == lb.target {
        return img.clone();
    }
    let resized = if (nw, nh) == img.dimensions() {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, FilterType::Triangle)
    };
    let mut canvas = RgbImage::from_pixel(lb.target, lb.target, Rgb([LETTERBOX_PAD; 3]));
    imageops::replace(&mut canvas, &resized, lb.pad_x as i64, lb.pad_y as i64);
    canvas
}

/// Aspect-preserving resize onto a centered gray square of side `target`.
pub fn letterbox(rec: &DatasetRecord, target: u32) -> Result<(DatasetRecord, Letterbox)> {
    if target == 0 || target % 32 != 0 {
        return Err(config_err!("letterbox target {target} must be a positive multiple of 32"));
    }
    let lb = Letterbox::fit(rec.width(), rec.height(), target);
    let out = DatasetRecord {
        id: rec.id.clone(),
        image: letterbox_image(&rec.image, &lb),
        boxes: rec.boxes.iter().map(|b| lb.forward(b)).collect(),
        tags: rec.tags.clone(),
    };
    Ok((out, lb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn rec(w: u32, h: u32) -> DatasetRecord {
        DatasetRecord {
            id: "a".into(),
            image: RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7])),
            boxes: vec![BBox::new(f64::from(w) / 2.0, f64::from(h) / 2.0, 10.0, 20.0)],
            tags: BTreeSet::new(),
        }
    }

    #[test]
    fn square_input_at_target_is_unchanged() {
        let r = rec(416, 416);
        let (out, lb) = letterbox(&r, 416).unwrap();
        assert!(lb.is_identity());
        assert_eq!(out, r);
    }

    #[test]
    fn wide_frame_is_padded_vertically() {
        let (out, lb) = letterbox(&rec(1920, 1080), 416).unwrap();
        assert_eq!(lb.scale_x, 416.0 / 1920.0);
        assert_eq!((out.width(), out.height()), (416, 416));
        assert_eq!(lb.pad_x, 0.0);
        // 1080 * 416 / 1920 = 234 rows of content.
        assert_eq!(lb.pad_y, 91.0);
        assert_eq!(out.image.get_pixel(200, 0), &Rgb([LETTERBOX_PAD; 3]));
        assert_eq!(out.image.get_pixel(200, 415), &Rgb([LETTERBOX_PAD; 3]));
        assert_ne!(out.image.get_pixel(200, 208), &Rgb([LETTERBOX_PAD; 3]));
        assert!((out.boxes[0].cy - 208.0).abs() < 1e-9);
    }

    #[test]
    fn target_must_be_multiple_of_32() {
        assert!(letterbox(&rec(10, 10), 100).is_err());
    }

    proptest! {
        #[test]
        fn forward_then_inverse_is_identity(
            w in 1u32..3000, h in 1u32..3000, t in 1u32..20,
            fx in 0.0..1.0f64, fy in 0.0..1.0f64, fw in 0.0..1.0f64, fh in 0.0..1.0f64,
        ) {
            let lb = Letterbox::fit(w, h, t * 32);
            let b = BBox::new(fx * f64::from(w), fy * f64::from(h), fw * f64::from(w), fh * f64::from(h));
            let back = lb.inverse(&lb.forward(&b));
            for (p, q) in [(back.cx, b.cx), (back.cy, b.cy), (back.w, b.w), (back.h, b.h)] {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }
    }
}
