use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use image::{GrayImage, Luma, Rgb, RgbImage};
use tcyolo::anchors::{kmeans_anchors, mean_best_iou};
use tcyolo::blocks::{analyze_cio, forward, GraphConfig, Session};
use tcyolo::boxgeom::BBox;
use tcyolo::data::{
    image_tensor, letterbox_image, load_dataset, load_image, split, synth_dataset, DatasetRecord, Letterbox, Split,
    SynthSpec, DEFAULT_RATIOS,
};
use tcyolo::eval::{evaluate, EvalReport, ImageEval, Timing};
use tcyolo::Tape;

use crate::config::RunConfig;
use crate::model::{Model, PostProcess};
use crate::train;

fn data_err(msg: String) -> tcyolo::Error {
    tcyolo::Error::Data(msg)
}

fn config_err(msg: String) -> tcyolo::Error {
    tcyolo::Error::Config(msg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn anchors(data: &Path, seed: u64, size: Option<usize>, k: usize) -> Result<String> {
    let records = load_dataset(data)?;
    let mut dims = Vec::new();
    for r in &records {
        // Box sizes as the network sees them after letterboxing.
        let s = size.map_or(1.0, |s| Letterbox::fit(r.width(), r.height(), s as u32).scale_x);
        dims.extend(r.boxes.iter().map(|b| (b.w * s, b.h * s)));
    }
    if dims.len() < k {
        bail!(data_err(format!("{} boxes in {} are too few for {k} anchors", dims.len(), data.display())));
    }
    let set = kmeans_anchors(&dims, k, seed)?;
    let mut out = String::new();
    let _ = writeln!(out, "# {} boxes, mean best IoU {:.4}", dims.len(), mean_best_iou(&dims, &set));
    let pairs: Vec<String> = set.pairs().iter().map(|(w, h)| format!("[{w:.2}, {h:.2}]")).collect();
    let _ = writeln!(out, "[anchors]\nsizes = [{}]", pairs.join(", "));
    Ok(out)
}

pub fn synth(spec: &SynthSpec, out: &Path) -> Result<String> {
    let recs = synth_dataset(spec, out)?;
    let boxes: usize = recs.iter().map(|r| r.record.boxes.len()).sum();
    Ok(format!("wrote {} images ({boxes} boxes) to {}\n", recs.len(), out.display()))
}

/// Reads `root/splits` or creates and writes a seeded 6:3:1 split.
pub fn dataset_split(root: &Path, seed: u64) -> Result<Split<DatasetRecord>> {
    let records = load_dataset(root)?;
    if records.is_empty() {
        bail!(data_err(format!("no images under {}", root.join("images").display())));
    }
    let ids = match Split::read(root)? {
        Some(s) => s,
        None => {
            let s = split(records.iter().map(|r| r.id.clone()).collect(), DEFAULT_RATIOS, seed)?;
            s.write(root)?;
            s
        }
    };
    Ok(ids.select(records)?)
}

pub fn train(cfg: &RunConfig) -> Result<String> {
    let data = cfg.data.as_deref().ok_or_else(|| config_err("train needs --data".into()))?;
    let graph_path = cfg.graph.as_deref().ok_or_else(|| config_err("train needs --graph".into()))?;
    let graph_cfg = GraphConfig::load(graph_path)?;
    let size = cfg.input_size.unwrap_or(graph_cfg.model.input_size);
    // Shape problems surface here, before any data is read.
    let mut model = Model::init(graph_cfg, size, cfg.seed)?;
    let split = dataset_split(data, cfg.seed)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
    log::info!(
        "training {} parameters on {}/{}/{} images at {size}px for {} epochs",
        model.store.count(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        cfg.epochs
    );
    let o = train::train(&mut model, &split, cfg, &out)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.6}"));
    Ok(format!(
        "best epoch {} val AP {} test AP {}; checkpoint {}\n",
        o.best_epoch.unwrap_or(0),
        fmt(o.best_val_ap),
        fmt(o.test_ap),
        o.out_dir.join(train::BEST_CKPT).display()
    ))
}

fn post(cfg: &RunConfig, conf: f64) -> PostProcess {
    PostProcess {
        conf,
        nms_iou: cfg.nms_iou,
        max_det: cfg.max_det,
    }
}

pub fn format_detections(dets: &[BBox]) -> String {
    dets.iter()
        .map(|d| format!("{} {} {} {} {} {}\n", d.class.unwrap_or(0), d.cx, d.cy, d.w, d.h, d.score.unwrap_or(0.0)))
        .collect()
}

pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| tcyolo::Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: msg.to_owned(),
        };
        if f.len() != 6 {
            bail!(bad("expected `class cx cy w h score`"));
        }
        let class: usize = f[0].parse().map_err(|_| bad("bad class"))?;
        let v: Vec<f64> = f[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("bad number"))?;
        out.push(BBox::new(v[0], v[1], v[2], v[3]).with_score(v[4]).with_class(class));
    }
    Ok(out)
}

fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x1, y1, x2, y2) = b.corners();
    let (x1, y1) = (x1.floor() as i64, y1.floor() as i64);
    let (x2, y2) = ((x2.ceil() as i64 - 1).max(x1), (y2.ceil() as i64 - 1).max(y1));
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    for x in x1..=x2 {
        put(x, y1);
        put(x, y2);
    }
    for y in y1..=y2 {
        put(x1, y);
        put(x2, y);
    }
}

pub fn detect(cfg: &RunConfig, ckpt: &Path, pattern: &str, out: &Path, draw: bool, conf: Option<f64>) -> Result<String> {
    let model = Model::load(ckpt)?;
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| config_err(format!("bad --images pattern {pattern:?}: {e}")))?
        .collect::<Result<_, _>>()
        .context("expanding --images")?;
    paths.sort();
    if paths.is_empty() {
        bail!(data_err(format!("--images {pattern:?} matched no files")));
    }
    create_dir(out)?;
    let post = post(cfg, conf.unwrap_or(cfg.detect_conf));
    let mut timing = String::from("image,seconds,detections\n");
    let mut total = 0.0;
    let mut count = 0usize;
    for p in &paths {
        let stem = p
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| data_err(format!("bad image name {}", p.display())))?;
        let img = load_image(p)?;
        let start = Instant::now();
        let dets = model.detect(&img, post)?;
        let secs = start.elapsed().as_secs_f64();
        total += secs;
        count += dets.len();
        let _ = writeln!(timing, "{stem},{secs:.6},{}", dets.len());
        let file = out.join(format!("{stem}.txt"));
        fs::write(&file, format_detections(&dets)).with_context(|| format!("writing {}", file.display()))?;
        if draw {
            let mut canvas = img.clone();
            for d in &dets {
                draw_box(&mut canvas, d, Rgb([255, 0, 0]));
            }
            let file = out.join(format!("{stem}.png"));
            canvas.save(&file).with_context(|| format!("writing {}", file.display()))?;
        }
    }
    let t = Timing {
        images: paths.len(),
        seconds: total,
    };
    let summary = format!(
        "{} images, {count} detections, {:.3} s, {:.2} images/s\n",
        t.images,
        t.seconds,
        t.images_per_sec()
    );
    timing.push_str(&format!("# {summary}"));
    fs::write(out.join("timing.csv"), timing).context("writing timing summary")?;
    Ok(summary)
}

/// Which partition of the dataset to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Part {
    Train,
    Val,
    Test,
    All,
}

pub fn eval_records(data: &Path, part: Part, seed: u64) -> Result<Vec<DatasetRecord>> {
    if part == Part::All {
        return Ok(load_dataset(data)?);
    }
    let s = dataset_split(data, seed)?;
    Ok(match part {
        Part::Train => s.train,
        Part::Val => s.val,
        Part::Test | Part::All => s.test,
    })
}

pub fn write_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    if let Some(dir) = out {
        create_dir(dir)?;
        fs::write(dir.join("report.csv"), report.render_csv()).context("writing report.csv")?;
        fs::write(dir.join("pr.csv"), report.render_pr()).context("writing pr.csv")?;
        fs::write(dir.join("report.txt"), report.render_text()).context("writing report.txt")?;
    }
    Ok(())
}

pub struct EvalArgs<'a> {
    pub ckpt: Option<&'a Path>,
    pub dets: Option<&'a Path>,
    pub data: &'a Path,
    pub part: Part,
    pub out: Option<&'a Path>,
    pub conf: Option<f64>,
}

pub fn eval(cfg: &RunConfig, a: EvalArgs) -> Result<String> {
    let records = eval_records(a.data, a.part, cfg.seed)?;
    let report = match (a.ckpt, a.dets) {
        (Some(ckpt), None) => {
            let model = Model::load(ckpt)?;
            model.evaluate(&records, post(cfg, a.conf.unwrap_or(cfg.eval_conf)), cfg.iou_threshold)?
        }
        (None, Some(dir)) => {
            let mut images = Vec::new();
            for r in &records {
                let file = dir.join(format!("{}.txt", r.id));
                let dets = if file.is_file() {
                    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
                    parse_detections(&text, &file)?
                } else {
                    Vec::new()
                };
                images.push(ImageEval {
                    id: r.id.clone(),
                    dets,
                    gts: r.boxes.clone(),
                    tags: r.tags.clone(),
                });
            }
            evaluate(&images, cfg.iou_threshold)
        }
        _ => bail!(config_err("eval needs exactly one of --ckpt or --dets".into())),
    };
    write_report(&report, a.out)?;
    Ok(report.render_text())
}

pub fn analyze(path: &Path, size: usize, csv: bool) -> Result<String> {
    let cfg = GraphConfig::load(path)?;
    let graph = cfg.build()?;
    let shapes = graph.infer_shapes(size, size)?;
    let mut s = String::new();
    if csv {
        let cio = analyze_cio(&graph)?;
        s.push_str("block,c,m,d,cio_dense,cio_partial,saving\n");
        for r in &cio.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.block,
                r.c,
                r.m,
                r.d,
                r.dense.as_f64(),
                r.partial.as_f64(),
                r.saving()
            );
        }
        let _ = writeln!(s, "total,,,,{},{},", cio.total_dense.as_f64(), cio.total_partial.as_f64());
        s.push_str("node,kind,step,c,h,w\n");
        for (n, sh) in graph.nodes().iter().zip(&shapes) {
            let _ = writeln!(s, "{},{},{},{},{},{}", n.name, n.spec.kind(), n.step, sh.c, sh.h, sh.w);
        }
        let _ = writeln!(s, "parameters,{}", graph.param_count());
        return Ok(s);
    }
    let _ = writeln!(s, "graph {} at {size}x{size}, unroll steps {}", cfg.model.name, graph.steps());
    let _ = writeln!(s, "{:<22} {:<12} {:>4} {:>16}", "node", "kind", "step", "C x H x W");
    for (n, sh) in graph.nodes().iter().zip(&shapes) {
        let _ = writeln!(
            s,
            "{:<22} {:<12} {:>4} {:>16}",
            n.name,
            n.spec.kind(),
            n.step,
            format!("{}x{}x{}", sh.c, sh.h, sh.w)
        );
    }
    let heads: Vec<String> = graph
        .heads()
        .iter()
        .zip(graph.head_strides())
        .map(|(&h, st)| format!("stride {st}: {}x{}", shapes[h].h, shapes[h].w))
        .collect();
    let _ = writeln!(s, "heads: {}", heads.join(", "));
    let cio = analyze_cio(&graph)?;
    let _ = writeln!(s, "{:<14} {:>5} {:>3} {:>4} {:>12} {:>12} {:>8}", "block", "c", "m", "d", "CIO dense", "CIO partial", "saving");
    for r in &cio.rows {
        let _ = writeln!(
            s,
            "{:<14} {:>5} {:>3} {:>4} {:>12} {:>12} {:>7.2}%",
            r.block,
            r.c,
            r.m,
            r.d,
            r.dense.ceil(),
            r.partial.ceil(),
            r.saving() * 100.0
        );
    }
    let _ = writeln!(
        s,
        "total CIO: dense {} partial {}",
        cio.total_dense.ceil(),
        cio.total_partial.ceil()
    );
    let _ = writeln!(s, "parameters: {}", graph.param_count());
    Ok(s)
}

/// Resolves a user layer name: exact node name, or the last unrolled copy
/// `name@T`.
fn resolve_layer(model: &Model, name: &str) -> Option<usize> {
    model.graph.node(name).or_else(|| {
        (1..=model.graph.steps())
            .rev()
            .find_map(|t| model.graph.node(&format!("{name}@{t}")))
    })
}

pub fn activations(ckpt: &Path, image: &Path, layers: &[String], out: &Path) -> Result<String> {
    let model = Model::load(ckpt)?;
    let idx: Vec<usize> = layers
        .iter()
        .map(|l| {
            resolve_layer(&model, l).ok_or_else(|| {
                let names: Vec<&str> = model.graph.nodes().iter().map(|n| n.name.as_str()).collect();
                config_err(format!("unknown layer {l:?}; available: {}", names.join(", ")))
            })
        })
        .collect::<Result<_, _>>()?;
    let img = load_image(image)?;
    let lb = Letterbox::fit(img.width(), img.height(), model.input_size as u32);
    let input = image_tensor(&letterbox_image(&img, &lb));
    let mut tape = Tape::inference();
    let mut sess = Session::infer(&model.store);
    let x = tape.constant(input);
    let fwd = forward(&model.graph, &mut sess, &mut tape, x)?;
    create_dir(out)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mut report = String::new();
    for (name, &i) in layers.iter().zip(&idx) {
        let t = tape.value(fwd.nodes[i]);
        let (_, c, h, w) = t.dims4()?;
        let mut mean = vec![0.0; h * w];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&t.data()[ch * h * w..(ch + 1) * h * w]) {
                *m += v / c as f64;
            }
        }
        let (lo, hi) = mean.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = hi - lo;
        let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            let v = mean[y as usize * w + x as usize];
            Luma([if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 }])
        });
        let file = out.join(format!("{stem}_{}.png", name.replace(['/', '@'], "_")));
        gray.save(&file).with_context(|| format!("writing {}", file.display()))?;
        let _ = writeln!(report, "{name}: {c}x{h}x{w} -> {}", file.display());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_files_round_trip() {
        let dets = vec![
            BBox::new(10.125, 3.0 / 7.0, 5.5, 1e-3).with_score(0.123_456_789_012_345_67).with_class(0),
            BBox::new(0.1, 0.2, 0.3, 0.4).with_score(1.0).with_class(2),
        ];
        let text = format_detections(&dets);
        assert_eq!(parse_detections(&text, Path::new("d.txt")).unwrap(), dets);
        assert!(parse_detections("0 1 2 3\n", Path::new("d.txt")).is_err());
    }
}
