//! SGD training loop: warmup, step decay, per-epoch validation and the
//! best-AP checkpoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcyolo::blocks::{forward, ParamKind, ParamStore, Session};
use tcyolo::boxgeom::{assign_targets, total_loss, LossBreakdown, LossWeights};
use tcyolo::data::{augment, letterbox, AugmentOp, DatasetRecord, Split};
use tcyolo::{Tape, Tensor};

use crate::config::RunConfig;
use crate::model::{Model, PostProcess};

pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.toml";

/// Momentum SGD with decoupled learning rates for biases.
#[derive(Default)]
pub struct Sgd {
    velocity: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRates {
    pub lr: f64,
    pub bias_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// `g += wd·w` for decayed kinds, `v = μ·v + g`, `w -= lr·v`.
    pub fn step(&mut self, store: &mut ParamStore, grads: Vec<(String, Tensor)>, r: StepRates) -> Result<()> {
        for (name, mut g) in grads {
            let kind = store.info(&name).map_or(ParamKind::Weight, |i| i.kind);
            if !kind.trainable() {
                continue;
            }
            let lr = if kind == ParamKind::Bias { r.bias_lr } else { r.lr };
            let w = store.get_mut(&name)?;
            if kind.decayed() && r.weight_decay != 0.0 {
                for (gi, wi) in g.data_mut().iter_mut().zip(w.data()) {
                    *gi += r.weight_decay * wi;
                }
            }
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
                *vi = r.momentum * *vi + gi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Rates at global iteration `it` of epoch `epoch`, with linear warmup over
/// the first `warmup_iters` iterations.
pub fn rates(cfg: &RunConfig, epoch: usize, epochs: usize, it: usize, warmup_iters: usize) -> StepRates {
    let lr = cfg.lr * cfg.lr_factor(epoch, epochs);
    let mut r = StepRates {
        lr,
        bias_lr: lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    if it < warmup_iters {
        let t = it as f64 / warmup_iters as f64;
        r.lr = lr * t;
        r.bias_lr = cfg.warmup_bias_lr + (lr - cfg.warmup_bias_lr) * t;
        r.momentum = cfg.warmup_momentum + (cfg.momentum - cfg.warmup_momentum) * t;
    }
    r
}

pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub epoch_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_ap: Option<f64>,
    pub test_ap: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_owned(), |x| format!("{x:.17}"))
}

/// One forward/backward pass; returns the loss parts and parameter gradients
/// and writes batch-norm running statistics back into the store.
fn train_step(model: &mut Model, batch: &[DatasetRecord], weights: LossWeights) -> Result<(LossBreakdown, Vec<(String, Tensor)>)> {
    let imgs: Vec<Tensor> = batch.iter().map(DatasetRecord::to_tensor).collect();
    let targets = batch
        .iter()
        .map(|r| assign_targets(&r.boxes, &model.cfg.anchors.sizes, &model.grids, &r.id))
        .collect::<tcyolo::Result<Vec<_>>>()?;
    let strides = model.strides();
    let layout = model.cfg.head_layout();
    let (parts, grads, running) = {
        let mut tape = Tape::new();
        let mut sess = Session::train(&model.store);
        let x = tape.constant(Tensor::stack(&imgs)?);
        let out = forward(&model.graph, &mut sess, &mut tape, x)?;
        let (loss, parts) = total_loss(
            &mut tape,
            &out.heads,
            layout,
            &model.cfg.anchors.sizes,
            &strides,
            &targets,
            weights,
        )?;
        let mut grads = tape.backward(loss)?;
        let g: Vec<(String, Tensor)> = sess
            .vars()
            .iter()
            .filter_map(|(n, &v)| grads.take(v).map(|t| (n.clone(), t)))
            .collect();
        (parts, g, sess.into_running_updates())
    };
    for (prefix, stats) in running {
        model.store.set_running(&prefix, stats)?;
    }
    Ok((parts, grads))
}

/// Trains on `split.train`, selects the checkpoint by validation AP and
/// reports test AP of that checkpoint as reloaded from disk.
pub fn train(model: &mut Model, split: &Split<DatasetRecord>, cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    if split.train.is_empty() {
        bail!(tcyolo::Error::Data("training split is empty".into()));
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let size = model.input_size as u32;
    let boxed = |recs: &[DatasetRecord]| -> Result<Vec<DatasetRecord>> {
        Ok(recs.iter().map(|r| letterbox(r, size).map(|(r, _)| r)).collect::<tcyolo::Result<_>>()?)
    };
    let train_set = boxed(&split.train)?;
    let ops: Vec<Option<AugmentOp>> = std::iter::once(None).chain(cfg.augment_ops()?.into_iter().map(Some)).collect();
    let weights = cfg.loss.unwrap_or(model.cfg.loss);
    let post = PostProcess {
        conf: cfg.eval_conf,
        nms_iou: cfg.nms_iou,
        max_det: cfg.max_det,
    };

    let epochs = cfg.epochs;
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let warmup_iters = (cfg.warmup_epochs * per_epoch as f64).round() as usize;
    let mut sgd = Sgd::default();
    let mut log = String::from("epoch,lr,loss,box,obj,cls,positives,val_ap,seconds\n");
    let mut best: Option<(usize, f64)> = None;
    let mut losses = Vec::new();
    let best_path = out_dir.join(BEST_CKPT);
    model.checkpoint(&[("epoch", "0".into())])?.save(&best_path)?;

    for epoch in 0..epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut positives = 0usize;
        let mut last_rates = rates(cfg, epoch, epochs, epoch * per_epoch, warmup_iters);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<DatasetRecord> = chunk
                .iter()
                .map(|&i| match ops[rng.gen_range(0..ops.len())] {
                    Some(op) => augment(&train_set[i], op),
                    None => train_set[i].clone(),
                })
                .collect();
            let (parts, grads) = train_step(model, &batch, weights)?;
            if !parts.total.is_finite() {
                bail!(tcyolo::Error::Data(format!("loss became {} at epoch {}", parts.total, epoch + 1)));
            }
            last_rates = rates(cfg, epoch, epochs, epoch * per_epoch + b, warmup_iters);
            sgd.step(&mut model.store, grads, last_rates)?;
            for (s, v) in sums.iter_mut().zip([parts.total, parts.bbox, parts.obj, parts.cls]) {
                *s += v;
            }
            positives += parts.positives;
        }
        let n = per_epoch as f64;
        let mean = sums.map(|s| s / n);
        losses.push(mean[0]);

        // Score the weights exactly as they will be stored.
        let mut snapshot = model.clone();
        snapshot.store.round_to_f32();
        let val_ap = if split.val.is_empty() {
            None
        } else {
            snapshot.evaluate(&split.val, post, cfg.iou_threshold)?.ap
        };
        let secs = start.elapsed().as_secs_f64();
        let _ = writeln!(
            log,
            "{},{},{},{},{},{},{},{},{:.3}",
            epoch + 1,
            last_rates.lr,
            mean[0],
            mean[1],
            mean[2],
            mean[3],
            positives,
            fmt_opt(val_ap),
            secs
        );
        info!(
            "epoch {}/{epochs}: loss {:.5} (box {:.5} obj {:.5} cls {:.5}) val AP {} [{secs:.1}s]",
            epoch + 1,
            mean[0],
            mean[1],
            mean[2],
            mean[3],
            val_ap.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
        let score = val_ap.unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((epoch + 1, score));
            snapshot
                .checkpoint(&[("epoch", (epoch + 1).to_string()), ("val_ap", fmt_opt(val_ap))])?
                .save(&best_path)?;
        }
        fs::write(out_dir.join(LOG_FILE), &log).context("writing training log")?;
    }
    fs::write(out_dir.join(LOG_FILE), &log).context("writing training log")?;
    model
        .checkpoint(&[("epoch", epochs.to_string())])?
        .save(&out_dir.join(LAST_CKPT))?;

    let reloaded = Model::load(&best_path)?;
    let test_ap = if split.test.is_empty() {
        None
    } else {
        reloaded.evaluate(&split.test, post, cfg.iou_threshold)?.ap
    };
    let best_val_ap = best.and_then(|(_, v)| v.is_finite().then_some(v));
    let summary = format!(
        "epochs = {epochs}\nbest_epoch = {}\nbest_val_ap = \"{}\"\ntest_ap = \"{}\"\nfirst_loss = \"{}\"\nlast_loss = \"{}\"\n",
        best.map_or(0, |(e, _)| e),
        fmt_opt(best_val_ap),
        fmt_opt(test_ap),
        fmt_opt(losses.first().copied()),
        fmt_opt(losses.last().copied()),
    );
    fs::write(out_dir.join(SUMMARY_FILE), summary).context("writing summary")?;
    Ok(TrainOutcome {
        out_dir: out_dir.to_path_buf(),
        epoch_losses: losses,
        best_epoch: best.map(|(e, _)| e),
        best_val_ap,
        test_ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramps_from_configured_starts() {
        let cfg = RunConfig::default();
        let r0 = rates(&cfg, 0, 10, 0, 30);
        assert_eq!((r0.lr, r0.bias_lr, r0.momentum), (0.0, 0.1, 0.8));
        let mid = rates(&cfg, 0, 10, 15, 30);
        assert!((mid.bias_lr - 0.055).abs() < 1e-12);
        assert!((mid.momentum - 0.8685).abs() < 1e-12);
        let done = rates(&cfg, 1, 10, 30, 30);
        assert_eq!((done.lr, done.bias_lr, done.momentum), (0.01, 0.01, 0.937));
    }

    #[test]
    fn sgd_update_matches_hand_computation() {
        use tcyolo::blocks::{init_params, Init, ParamInfo};
        let infos: BTreeMap<String, ParamInfo> = [
            (
                "w".to_owned(),
                ParamInfo {
                    shape: vec![2],
                    kind: ParamKind::Weight,
                    init: Init::Ones,
                },
            ),
            (
                "b".to_owned(),
                ParamInfo {
                    shape: vec![1],
                    kind: ParamKind::Bias,
                    init: Init::Ones,
                },
            ),
        ]
        .into_iter()
        .collect();
        let mut store = init_params(&infos, 0);
        let mut sgd = Sgd::default();
        let r = StepRates {
            lr: 0.1,
            bias_lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.01,
        };
        let grads = || vec![("w".to_owned(), Tensor::full(&[2], 2.0)), ("b".to_owned(), Tensor::full(&[1], 1.0))];
        sgd.step(&mut store, grads(), r).unwrap();
        // w: g = 2 + 0.01 = 2.01, v = 2.01, w = 1 - 0.201
        assert!((store.get("w").unwrap().data()[0] - 0.799).abs() < 1e-15);
        // b: no decay, v = 1, b = 1 - 0.5
        assert_eq!(store.get("b").unwrap().data()[0], 0.5);
        sgd.step(&mut store, grads(), r).unwrap();
        let g = 2.0 + 0.01 * 0.799;
        let v = 0.9 * 2.01 + g;
        assert!((store.get("w").unwrap().data()[0] - (0.799 - 0.1 * v)).abs() < 1e-15);
    }
}
