//! Dataset records, label I/O, splitting, augmentation, letterboxing and the
//! synthetic flower generator.

mod augment;
mod letterbox;
mod synth;

pub use augment::{augment, AugmentOp};
pub use letterbox::{letterbox, letterbox_image, Letterbox, LETTERBOX_PAD};
pub use synth::{synth_dataset, SynthRecord, SynthSpec};

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxgeom::BBox;
use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

/// Box coordinates are stored on this sub-pixel grid so that flips and
/// rotations, which subtract from the image extent, are exact.
pub const COORD_GRID: f64 = 1024.0;

pub fn snap(v: f64) -> f64 {
    (v * COORD_GRID).round() / COORD_GRID
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    StrongLight,
    WeakLight,
    NormalLight,
    HighOverlap,
    ModerateOverlap,
    NormalOverlap,
    HighOcclusion,
    ModerateOcclusion,
    NormalOcclusion,
}

impl Scenario {
    pub const ALL: [Scenario; 9] = [
        Scenario::StrongLight,
        Scenario::WeakLight,
        Scenario::NormalLight,
        Scenario::HighOverlap,
        Scenario::ModerateOverlap,
        Scenario::NormalOverlap,
        Scenario::HighOcclusion,
        Scenario::ModerateOcclusion,
        Scenario::NormalOcclusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::StrongLight => "strong_light",
            Scenario::WeakLight => "weak_light",
            Scenario::NormalLight => "normal_light",
            Scenario::HighOverlap => "high_overlap",
            Scenario::ModerateOverlap => "moderate_overlap",
            Scenario::NormalOverlap => "normal_overlap",
            Scenario::HighOcclusion => "high_occlusion",
            Scenario::ModerateOcclusion => "moderate_occlusion",
            Scenario::NormalOcclusion => "normal_occlusion",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown scenario tag {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub image: RgbImage,
    /// Ground truth in pixels, class set on every box.
    pub boxes: Vec<BBox>,
    pub tags: BTreeSet<Scenario>,
}

impl DatasetRecord {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    /// `[1, 3, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        image_tensor(&self.image)
    }
}

pub fn image_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        f64::from(raw[rest * 3 + c]) / 255.0
    })
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.into_rgb8())
}

/// Parses one `class cx cy w h` label file (normalized coordinates) against
/// an image of `width × height` pixels.
pub fn parse_labels(text: &str, path: &Path, width: u32, height: u32) -> Result<Vec<BBox>> {
    let (fw, fh) = (f64::from(width), f64::from(height));
    let mut boxes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("class {:?} is not a non-negative integer", fields[0])))?;
        let mut v = [0.0; 4];
        for (slot, s) in v.iter_mut().zip(&fields[1..]) {
            let x: f64 = s.parse().map_err(|_| err(format!("{s:?} is not a number")))?;
            if !(0.0..=1.0).contains(&x) {
                return Err(err(format!("coordinate {x} outside [0, 1]")));
            }
            *slot = x;
        }
        let [cx, cy, w, h] = v;
        let x1 = ((cx - w / 2.0) * fw).clamp(0.0, fw);
        let x2 = ((cx + w / 2.0) * fw).clamp(0.0, fw);
        let y1 = ((cy - h / 2.0) * fh).clamp(0.0, fh);
        let y2 = ((cy + h / 2.0) * fh).clamp(0.0, fh);
        let (x1, x2, y1, y2) = (snap(x1), snap(x2), snap(y1), snap(y2));
        if x1 >= x2 || y1 >= y2 {
            return Err(err("box has no area inside the image".into()));
        }
        boxes.push(BBox::from_corners(x1, y1, x2, y2).with_class(class));
    }
    Ok(boxes)
}

pub fn format_labels(boxes: &[BBox], width: u32, height: u32) -> String {
    let (fw, fh) = (f64::from(width), f64::from(height));
    boxes
        .iter()
        .map(|b| {
            format!(
                "{} {} {} {} {}\n",
                b.class.unwrap_or(0),
                b.cx / fw,
                b.cy / fh,
                b.w / fw,
                b.h / fh
            )
        })
        .collect()
}

pub fn parse_tags(text: &str, path: &Path) -> Result<BTreeSet<Scenario>> {
    let mut tags = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let tag = t.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: format!("unknown scenario tag {t:?}"),
        })?;
        tags.insert(tag);
    }
    Ok(tags)
}

/// Reads `root/images`, `root/labels` and the optional `root/tags`, in file
/// name order.
pub fn load_dataset(root: &Path) -> Result<Vec<DatasetRecord>> {
    let images = root.join("images");
    let labels = root.join("labels");
    for dir in [&images, &labels] {
        if !dir.is_dir() {
            return Err(Error::Data(format!("dataset directory {} does not exist", dir.display())));
        }
    }
    let mut records = Vec::new();
    for path in read_dir_sorted(&images)?.into_iter().filter(|p| is_image(p)) {
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
            continue;
        };
        records.push(load_record(root, &id, &path)?);
    }
    Ok(records)
}

fn load_record(root: &Path, id: &str, image_path: &Path) -> Result<DatasetRecord> {
    let image = load_image(image_path)?;
    let label_path = root.join("labels").join(format!("{id}.txt"));
    let boxes = if label_path.is_file() {
        let text = fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
        parse_labels(&text, &label_path, image.width(), image.height())?
    } else {
        log::warn!("image {id} has no label file; loading it with zero boxes");
        Vec::new()
    };
    let tag_path = root.join("tags").join(format!("{id}.txt"));
    let tags = if tag_path.is_file() {
        let text = fs::read_to_string(&tag_path).map_err(|e| Error::io(&tag_path, e))?;
        parse_tags(&text, &tag_path)?
    } else {
        BTreeSet::new()
    };
    Ok(DatasetRecord {
        id: id.to_owned(),
        image,
        boxes,
        tags,
    })
}

/// Writes a record as PNG plus label and tag files under `root`.
pub fn save_record(root: &Path, rec: &DatasetRecord) -> Result<()> {
    for sub in ["images", "labels", "tags"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let img_path = root.join("images").join(format!("{}.png", rec.id));
    rec.image.save(&img_path).map_err(|source| Error::Image {
        path: img_path.clone(),
        source,
    })?;
    let label_path = root.join("labels").join(format!("{}.txt", rec.id));
    fs::write(&label_path, format_labels(&rec.boxes, rec.width(), rec.height())).map_err(|e| Error::io(&label_path, e))?;
    let tag_path = root.join("tags").join(format!("{}.txt", rec.id));
    let tags: String = rec.tags.iter().map(|t| format!("{t}\n")).collect();
    fs::write(&tag_path, tags).map_err(|e| Error::io(&tag_path, e))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

pub const DEFAULT_RATIOS: [u32; 3] = [6, 3, 1];

/// Partition sizes for `n` items by largest remainder; ties go to the
/// earlier partition.
pub fn split_sizes(n: usize, ratios: [u32; 3]) -> Result<[usize; 3]> {
    if ratios.contains(&0) {
        return Err(config_err!("split ratios {ratios:?} must all be positive"));
    }
    let total: u64 = ratios.iter().map(|&r| u64::from(r)).sum();
    let mut sizes = [0usize; 3];
    let mut rem = [(0u64, 0usize); 3];
    for (i, &r) in ratios.iter().enumerate() {
        let num = n as u64 * u64::from(r);
        sizes[i] = (num / total) as usize;
        rem[i] = (num % total, i);
    }
    let left = n - sizes.iter().sum::<usize>();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rem.iter().take(left) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Seeded shuffle followed by a largest-remainder cut.
pub fn split<T>(items: Vec<T>, ratios: [u32; 3], seed: u64) -> Result<Split<T>> {
    if items.len() < 3 {
        return Err(Error::Data(format!("cannot split {} records into 3 partitions", items.len())));
    }
    let sizes = split_sizes(items.len(), ratios)?;
    let mut items = items;
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = items.split_off(sizes[0] + sizes[1]);
    let val = items.split_off(sizes[0]);
    Ok(Split { train: items, val, test })
}

impl Split<String> {
    pub fn write(&self, root: &Path) -> Result<()> {
        let dir = root.join("splits");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let path = dir.join(format!("{name}.txt"));
            let text: String = ids.iter().map(|id| format!("{id}\n")).collect();
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// `None` when `root/splits` has not been written.
    pub fn read(root: &Path) -> Result<Option<Self>> {
        let dir = root.join("splits");
        if !dir.is_dir() {
            return Ok(None);
        }
        let read = |name: &str| -> Result<Vec<String>> {
            let path = dir.join(format!("{name}.txt"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect())
        };
        Ok(Some(Split {
            train: read("train")?,
            val: read("val")?,
            test: read("test")?,
        }))
    }

    /// Moves records into partitions by id; every id must be present.
    pub fn select(&self, records: Vec<DatasetRecord>) -> Result<Split<DatasetRecord>> {
        let mut by_id: std::collections::BTreeMap<String, DatasetRecord> =
            records.into_iter().map(|r| (r.id.clone(), r)).collect();
        let mut take = |ids: &[String]| -> Result<Vec<DatasetRecord>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .remove(id)
                        .ok_or_else(|| Error::Data(format!("split manifest names unknown or repeated image {id:?}")))
                })
                .collect()
        };
        Ok(Split {
            train: take(&self.train)?,
            val: take(&self.val)?,
            test: take(&self.test)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> PathBuf {
        PathBuf::from("x.txt")
    }

    #[test]
    fn label_scaling() {
        let b = parse_labels("0 0.5 0.5 0.25 0.25\n", &p(), 400, 400).unwrap();
        assert_eq!(b, vec![BBox::new(200.0, 200.0, 100.0, 100.0).with_class(0)]);
        assert!(parse_labels("", &p(), 400, 400).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_coordinate_is_rejected() {
        let err = parse_labels("0 0.5 0.5 0.25 0.25\n0 1.2 0.5 0.1 0.1\n", &p(), 100, 100).unwrap_err();
        match err {
            Error::Parse { line, ref path, .. } => {
                assert_eq!(line, 2);
                assert_eq!(path, &p());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_lines() {
        for bad in ["0 0.5 0.5 0.2", "a 0.5 0.5 0.2 0.2", "0 0.5 x 0.2 0.2", "0 0.5 0.5 0 0.2"] {
            assert!(matches!(parse_labels(bad, &p(), 64, 64), Err(Error::Parse { line: 1, .. })), "{bad}");
        }
    }

    #[test]
    fn boxes_clamped_into_image() {
        let b = parse_labels("0 0.05 0.5 0.2 0.2\n", &p(), 100, 100).unwrap()[0];
        let (x1, _, x2, _) = b.corners();
        assert_eq!((x1, x2), (0.0, 15.0));
    }

    #[test]
    fn labels_round_trip() {
        let boxes = vec![BBox::new(32.5, 20.0, 11.0, 7.25).with_class(0)];
        let text = format_labels(&boxes, 64, 48);
        assert_eq!(parse_labels(&text, &p(), 64, 48).unwrap(), boxes);
    }

    #[test]
    fn tags_parse_and_reject_unknown() {
        let t = parse_tags("weak_light\nhigh_overlap\n\n", &p()).unwrap();
        assert_eq!(t.into_iter().collect::<Vec<_>>(), vec![Scenario::WeakLight, Scenario::HighOverlap]);
        assert!(parse_tags("dusk\n", &p()).is_err());
        for s in Scenario::ALL {
            assert_eq!(s.as_str().parse::<Scenario>().unwrap(), s);
        }
    }

    #[test]
    fn split_sizes_examples() {
        assert_eq!(split_sizes(1000, DEFAULT_RATIOS).unwrap(), [600, 300, 100]);
        assert_eq!(split_sizes(10, DEFAULT_RATIOS).unwrap(), [6, 3, 1]);
        assert_eq!(split_sizes(200, DEFAULT_RATIOS).unwrap(), [120, 60, 20]);
        // 7 * (0.6, 0.3, 0.1) = (4.2, 2.1, 0.7): the 0.7 remainder wins.
        assert_eq!(split_sizes(7, DEFAULT_RATIOS).unwrap(), [4, 2, 1]);
        assert!(split_sizes(10, [6, 0, 1]).is_err());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let items: Vec<u32> = (0..53).collect();
        let a = split(items.clone(), DEFAULT_RATIOS, 9).unwrap();
        assert_eq!(a, split(items.clone(), DEFAULT_RATIOS, 9).unwrap());
        assert_ne!(a, split(items.clone(), DEFAULT_RATIOS, 10).unwrap());
        let mut all: Vec<u32> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        assert!(split(vec![1, 2], DEFAULT_RATIOS, 0).is_err());
    }

    #[test]
    fn image_tensor_layout() {
        let mut img = RgbImage::new(3, 2);
        img.put_pixel(2, 1, image::Rgb([255, 0, 51]));
        let t = image_tensor(&img);
        assert_eq!(t.shape(), &[1, 3, 2, 3]);
        assert_eq!(t.at4(0, 0, 1, 2), 1.0);
        assert_eq!(t.at4(0, 2, 1, 2), 0.2);
        assert_eq!(t.at4(0, 0, 0, 0), 0.0);
    }
}
