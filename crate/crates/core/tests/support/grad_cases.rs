//! Random small instances for every differentiable operator. Each case maps
//! an instance seed to the worst relative error between the tape gradient
//! and central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcyolo::anchors::AnchorSet;
use tcyolo::boxgeom::{giou_loss, giou_loss_grad, total_loss, Assignment, BBox, HeadLayout, LossWeights};
use tcyolo::blocks::focus_slice;
use tcyolo::tensor::gradcheck::{check_gradients, rel_error, FD_STEP};
use tcyolo::tensor::{Activation, BatchNormConfig, BnMode, Conv2dConfig, RunningStats};
use tcyolo::{Result, Tape, Tensor, Var};

pub const INSTANCES: u64 = 20;
pub const TOLERANCE: f64 = 1e-4;

pub type Case = fn(u64) -> Result<f64>;

pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", conv2d),
        ("batchnorm", batchnorm),
        ("activations", activations),
        ("pooling", pooling),
        ("resize", resize),
        ("concat", concat),
        ("focus", focus),
        ("giou_loss", giou),
        ("total_loss", loss),
    ]
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ seed)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for kinked activations.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A shuffled ramp: all values distinct and at least `gap` apart, so max
/// pooling never sees a tie within a finite-difference step.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).expect("shape matches")
}

/// Reduces `v` with random weights so every output element matters.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let mut r = rng(seed.wrapping_mul(31).wrapping_add(7));
    tape.weighted_sum(v, rand_tensor(&mut r, &shape, -1.0, 1.0))
}

fn conv2d(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (n, cin, cout) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
    let k = [1, 2, 3][r.gen_range(0..3)];
    let (stride, dilation) = (r.gen_range(1..3), r.gen_range(1..3));
    let padding = r.gen_range(0..k);
    let extent = (k - 1) * dilation + 1 + r.gen_range(0..4);
    let x = rand_tensor(&mut r, &[n, cin, extent, extent + 1], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[cout, cin, k, k], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[cout], -1.0, 1.0);
    let cfg = Conv2dConfig::new(stride, padding, dilation);
    let rep = check_gradients(&[x, w, b], FD_STEP, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), cfg)?;
        project(t, y, seed)
    })?;
    Ok(rep.max_rel_error)
}

fn batchnorm(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (n, c) = (r.gen_range(1..3), r.gen_range(1..4));
    let (h, w) = (r.gen_range(2..4), r.gen_range(2..4));
    let x = rand_tensor(&mut r, &[n, c, h, w], -2.0, 2.0);
    let g = rand_tensor(&mut r, &[c], 0.5, 1.5);
    let b = rand_tensor(&mut r, &[c], -0.5, 0.5);
    let running = RunningStats {
        mean: rand_tensor(&mut r, &[c], -0.3, 0.3),
        var: rand_tensor(&mut r, &[c], 0.5, 2.0),
    };
    let mode = if seed % 2 == 0 { BnMode::Train } else { BnMode::Infer };
    let rep = check_gradients(&[x, g, b], FD_STEP, |t, v| {
        let (y, _) = t.batchnorm(v[0], v[1], v[2], &running, mode, BatchNormConfig::default())?;
        project(t, y, seed)
    })?;
    Ok(rep.max_rel_error)
}

fn activations(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let x = away_from_zero(&mut r, &[1, 2, 3, 3]);
    let mut worst = 0.0f64;
    for act in [
        Activation::Mish,
        Activation::leaky(),
        Activation::Sigmoid,
        Activation::Relu,
        Activation::Linear,
    ] {
        let rep = check_gradients(std::slice::from_ref(&x), FD_STEP, |t, v| {
            let y = t.activation(v[0], act);
            project(t, y, seed)
        })?;
        worst = worst.max(rep.max_rel_error);
    }
    Ok(worst)
}

fn pooling(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(3..7), r.gen_range(3..7));
    let x = distinct(&mut r, &[1, 2, h, w], 0.01);
    let k = [1, 3, 5][r.gen_range(0..3)].min(2 * (h.min(w) / 2) + 1);
    let stride = r.gen_range(1..3);
    let rep = check_gradients(&[x], FD_STEP, |t, v| {
        let a = t.maxpool2d(v[0], k, stride, k / 2)?;
        let a = project(t, a, seed)?;
        let g = t.global_avgpool(v[0])?;
        let g = project(t, g, seed + 1)?;
        t.add(a, g)
    })?;
    Ok(rep.max_rel_error)
}

fn resize(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(1..4), r.gen_range(1..4));
    let x = rand_tensor(&mut r, &[1, 2, h, w], -1.0, 1.0);
    let f = r.gen_range(1..4);
    let (oh, ow) = (h * f, w * r.gen_range(1..4));
    let rep = check_gradients(&[x], FD_STEP, |t, v| {
        let y = t.resize_nearest(v[0], oh, ow)?;
        project(t, y, seed)
    })?;
    Ok(rep.max_rel_error)
}

fn concat(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(1..4), r.gen_range(1..4));
    let parts: Vec<Tensor> = (0..r.gen_range(2..4))
        .map(|_| {
            let c = r.gen_range(1..4);
            rand_tensor(&mut r, &[2, c, h, w], -1.0, 1.0)
        })
        .collect();
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let start = r.gen_range(0..total);
    let len = r.gen_range(1..=total - start);
    let rep = check_gradients(&parts, FD_STEP, |t, v| {
        let y = t.concat(v)?;
        let s = t.slice_channels(y, start, len)?;
        let a = project(t, y, seed)?;
        let b = project(t, s, seed + 1)?;
        t.add(a, b)
    })?;
    Ok(rep.max_rel_error)
}

/// Slicing, 3×3 convolution, batch norm and mish, as in the focus block.
fn focus(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (h, w) = (2 * r.gen_range(1..4), 2 * r.gen_range(1..4));
    let cout = r.gen_range(1..4);
    let x = rand_tensor(&mut r, &[2, 3, h, w], -1.0, 1.0);
    let wt = rand_tensor(&mut r, &[cout, 12, 3, 3], -0.3, 0.3);
    let g = rand_tensor(&mut r, &[cout], 0.5, 1.5);
    let b = rand_tensor(&mut r, &[cout], -0.5, 0.5);
    let running = RunningStats::new(cout);
    let rep = check_gradients(&[x, wt, g, b], FD_STEP, |t, v| {
        let s = focus_slice(t, v[0])?;
        let y = t.conv2d(s, v[1], None, Conv2dConfig::new(1, 1, 1))?;
        let (y, _) = t.batchnorm(y, v[2], v[3], &running, BnMode::Train, BatchNormConfig::default())?;
        let y = t.activation(y, Activation::Mish);
        project(t, y, seed)
    })?;
    Ok(rep.max_rel_error)
}

fn rand_box(r: &mut ChaCha8Rng) -> BBox {
    BBox::new(r.gen_range(0.0..40.0), r.gen_range(0.0..40.0), r.gen_range(2.0..30.0), r.gen_range(2.0..30.0))
}

fn giou(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (a, b) = (rand_box(&mut r), rand_box(&mut r));
    let (_, g) = giou_loss_grad(&a, &b);
    let mut worst = 0.0f64;
    for (k, gk) in g.iter().enumerate() {
        let bump = |delta: f64| {
            let mut p = [a.cx, a.cy, a.w, a.h];
            p[k] += delta;
            giou_loss(&BBox::new(p[0], p[1], p[2], p[3]), &b)
        };
        let numeric = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_error(*gk, numeric));
    }
    Ok(worst)
}

fn loss(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let classes = r.gen_range(1..3);
    let layout = HeadLayout::new(classes);
    let anchors = AnchorSet::paper();
    let strides = [8.0, 16.0, 32.0];
    let batch = r.gen_range(1..3);
    let grids = [(2, 2), (1, 2), (1, 1)];
    let heads: Vec<Tensor> = grids
        .iter()
        .map(|&(gh, gw)| rand_tensor(&mut r, &[batch, layout.channels(), gh, gw], -1.5, 1.5))
        .collect();
    let targets: Vec<Vec<Assignment>> = (0..batch)
        .map(|_| {
            (0..r.gen_range(0..3))
                .map(|_| {
                    let scale = r.gen_range(0..3);
                    let (gh, gw) = grids[scale];
                    let (i, j) = (r.gen_range(0..gh), r.gen_range(0..gw));
                    let s = strides[scale];
                    Assignment {
                        cell: (i, j),
                        anchor: r.gen_range(0..3),
                        scale,
                        target: BBox::new(
                            (j as f64 + r.gen_range(0.1..0.9)) * s,
                            (i as f64 + r.gen_range(0.1..0.9)) * s,
                            r.gen_range(5.0..60.0),
                            r.gen_range(5.0..60.0),
                        ),
                        objectness: 1.0,
                        class: r.gen_range(0..classes),
                    }
                })
                .collect()
        })
        .collect();
    let rep = check_gradients(&heads, FD_STEP, |t, v| {
        Ok(total_loss(t, v, layout, &anchors, &strides, &targets, LossWeights::default())?.0)
    })?;
    Ok(rep.max_rel_error)
}
