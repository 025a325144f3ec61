//! A graph config bound to parameter values, plus the inference pipeline:
//! letterbox, forward, decode, DIoU-NMS and the inverse letterbox.

use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use image::RgbImage;
use tcyolo::blocks::{forward, init_params, GraphConfig, ModelGraph, ParamStore, Session};
use tcyolo::boxgeom::{decode_head, diou_nms, BBox, GridSpec};
use tcyolo::data::{image_tensor, letterbox_image, DatasetRecord, Letterbox};
use tcyolo::eval::{evaluate, EvalReport, ImageEval, Timing};
use tcyolo::tensor::checkpoint::Checkpoint;
use tcyolo::{Tape, Tensor};

pub const META_GRAPH: &str = "graph";
pub const META_INPUT_SIZE: &str = "input_size";

#[derive(Clone)]
pub struct Model {
    pub cfg: GraphConfig,
    pub graph: ModelGraph,
    pub store: ParamStore,
    pub input_size: usize,
    pub grids: Vec<GridSpec>,
}

/// Score floor, DIoU threshold and per-image cap applied after decoding.
#[derive(Clone, Copy, Debug)]
pub struct PostProcess {
    pub conf: f64,
    pub nms_iou: f64,
    pub max_det: usize,
}

impl Model {
    /// Builds the graph and checks every shape at `input_size` before any
    /// parameter is touched.
    pub fn layout(cfg: &GraphConfig, input_size: usize) -> Result<(ModelGraph, Vec<GridSpec>)> {
        let graph = cfg.build()?;
        let shapes = graph.infer_shapes(input_size, input_size)?;
        let grids = graph
            .heads()
            .iter()
            .zip(graph.head_strides())
            .map(|(&h, s)| GridSpec {
                height: shapes[h].h,
                width: shapes[h].w,
                stride: s as f64,
            })
            .collect();
        Ok((graph, grids))
    }

    pub fn init(cfg: GraphConfig, input_size: usize, seed: u64) -> Result<Self> {
        let (graph, grids) = Self::layout(&cfg, input_size)?;
        let store = init_params(graph.params(), seed);
        Ok(Model {
            cfg,
            graph,
            store,
            input_size,
            grids,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Self::from_checkpoint(&ck).with_context(|| format!("loading {}", path.display()))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let text = ck
            .meta(META_GRAPH)
            .ok_or_else(|| tcyolo::Error::Checkpoint("checkpoint has no graph config".into()))?;
        let cfg = GraphConfig::from_toml_str(text)?;
        let input_size = match ck.meta(META_INPUT_SIZE) {
            Some(s) => s
                .parse()
                .map_err(|_| tcyolo::Error::Checkpoint(format!("bad input_size {s:?}")))?,
            None => cfg.model.input_size,
        };
        let (graph, grids) = Self::layout(&cfg, input_size)?;
        let store = ParamStore::from_checkpoint(ck, graph.params())?;
        Ok(Model {
            cfg,
            graph,
            store,
            input_size,
            grids,
        })
    }

    pub fn checkpoint(&self, extra: &[(&str, String)]) -> Result<Checkpoint> {
        let mut meta = vec![
            (META_GRAPH.to_owned(), self.cfg.to_toml_string()?),
            (META_INPUT_SIZE.to_owned(), self.input_size.to_string()),
        ];
        meta.extend(extra.iter().map(|(k, v)| ((*k).to_owned(), v.clone())));
        Ok(self.store.to_checkpoint(meta))
    }

    pub fn strides(&self) -> Vec<f64> {
        self.grids.iter().map(|g| g.stride).collect()
    }

    /// Decoded boxes per batch item in network-input pixels, before NMS.
    pub fn predict(&self, batch: Tensor) -> Result<Vec<Vec<BBox>>> {
        let mut tape = Tape::inference();
        let mut sess = Session::infer(&self.store);
        let x = tape.constant(batch);
        let out = forward(&self.graph, &mut sess, &mut tape, x)?;
        let layout = self.cfg.head_layout();
        let anchors = &self.cfg.anchors.sizes;
        let mut per_image: Vec<Vec<BBox>> = Vec::new();
        for (s, (&h, grid)) in out.heads.iter().zip(&self.grids).enumerate() {
            let decoded = decode_head(tape.value(h), anchors.scale(s), grid.stride, layout)?;
            if per_image.is_empty() {
                per_image = vec![Vec::new(); decoded.len()];
            }
            for (acc, boxes) in per_image.iter_mut().zip(decoded) {
                acc.extend(boxes);
            }
        }
        Ok(per_image)
    }

    /// Detections for one image in its own pixel coordinates.
    pub fn detect(&self, img: &RgbImage, post: PostProcess) -> Result<Vec<BBox>> {
        let lb = Letterbox::fit(img.width(), img.height(), self.input_size as u32);
        let input = letterbox_image(img, &lb);
        let boxes = self.predict(image_tensor(&input))?.pop().unwrap_or_default();
        let mut kept = diou_nms(&boxes, post.nms_iou, post.conf);
        kept.truncate(post.max_det);
        let (w, h) = (f64::from(img.width()), f64::from(img.height()));
        Ok(kept
            .iter()
            .map(|b| {
                let (x1, y1, x2, y2) = lb.inverse(b).corners();
                BBox {
                    score: b.score,
                    class: b.class,
                    ..BBox::from_corners(x1.clamp(0.0, w), y1.clamp(0.0, h), x2.clamp(0.0, w), y2.clamp(0.0, h))
                }
            })
            .collect())
    }

    /// Runs detection over `records` and scores it against their labels.
    pub fn evaluate(&self, records: &[DatasetRecord], post: PostProcess, tau: f64) -> Result<EvalReport> {
        let start = Instant::now();
        let mut images = Vec::with_capacity(records.len());
        for r in records {
            images.push(ImageEval {
                id: r.id.clone(),
                dets: self.detect(&r.image, post)?,
                gts: r.boxes.clone(),
                tags: r.tags.clone(),
            });
        }
        let seconds = start.elapsed().as_secs_f64();
        let mut report = evaluate(&images, tau);
        report.timing = Some(Timing {
            images: records.len(),
            seconds,
        });
        Ok(report)
    }
}
