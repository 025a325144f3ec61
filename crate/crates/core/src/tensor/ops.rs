//! Forward/backward kernels for the non-convolution operators.

use crate::error::{config_err, shape_err, Result};

use super::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the current batch in the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report updated running statistics.
    Train,
    /// Normalize with the stored running statistics.
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        }
    }
}

pub(crate) struct BnSaved {
    /// Normalized input (train mode only).
    pub xhat: Option<Tensor>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
    mode: BnMode,
    cfg: BatchNormConfig,
) -> Result<(Tensor, BnSaved, Option<RunningStats>)> {
    let (n, c, h, w) = x.dims4()?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running mean", &running.mean),
        ("running var", &running.var),
    ] {
        if t.shape() != [c] {
            return Err(shape_err!("batchnorm {name} has shape {:?}, expected [{c}]", t.shape()));
        }
    }
    let m = n * h * w;
    if m == 0 {
        return Err(config_err!("batchnorm: no elements per channel"));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0; c];
    match mode {
        BnMode::Train => {
            let mut xhat = Tensor::zeros(x.shape());
            let mut new_mean = running.mean.clone();
            let mut new_var = running.var.clone();
            for ch in 0..c {
                let mut sum = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    sum += x.data()[base..base + hw].iter().sum::<f64>();
                }
                let mean = sum / m as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    sq += x.data()[base..base + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                let var = sq / m as f64;
                let istd = 1.0 / (var + cfg.epsilon).sqrt();
                inv_std[ch] = istd;
                let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        let xh = (x.data()[i] - mean) * istd;
                        xhat.data_mut()[i] = xh;
                        out.data_mut()[i] = g * xh + bt;
                    }
                }
                let unbiased = if m > 1 { sq / (m - 1) as f64 } else { var };
                let mom = cfg.momentum;
                new_mean.data_mut()[ch] = (1.0 - mom) * running.mean.data()[ch] + mom * mean;
                new_var.data_mut()[ch] = (1.0 - mom) * running.var.data()[ch] + mom * unbiased;
            }
            let stats = RunningStats {
                mean: new_mean,
                var: new_var,
            };
            Ok((out, BnSaved { xhat: Some(xhat), inv_std }, Some(stats)))
        }
        BnMode::Infer => {
            for ch in 0..c {
                let istd = 1.0 / (running.var.data()[ch] + cfg.epsilon).sqrt();
                inv_std[ch] = istd;
                let mean = running.mean.data()[ch];
                let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        out.data_mut()[i] = g * (x.data()[i] - mean) * istd + bt;
                    }
                }
            }
            Ok((out, BnSaved { xhat: None, inv_std }, None))
        }
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batchnorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    running: &RunningStats,
    saved: &BnSaved,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = x.dims4().expect("checked in forward");
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let istd = saved.inv_std[ch];
        let g = gamma.data()[ch];
        let idx = (0..n).flat_map(|b| {
            let base = (b * c + ch) * hw;
            base..base + hw
        });
        match &saved.xhat {
            Some(xhat) => {
                let (mut sdy, mut sdyx) = (0.0, 0.0);
                for i in idx.clone() {
                    sdy += dy.data()[i];
                    sdyx += dy.data()[i] * xhat.data()[i];
                }
                dgamma.data_mut()[ch] = sdyx;
                dbeta.data_mut()[ch] = sdy;
                let k = g * istd / m;
                for i in idx {
                    dx.data_mut()[i] = k * (m * dy.data()[i] - sdy - xhat.data()[i] * sdyx);
                }
            }
            None => {
                let mean = running.mean.data()[ch];
                let (mut sdy, mut sdyx) = (0.0, 0.0);
                for i in idx.clone() {
                    sdy += dy.data()[i];
                    sdyx += dy.data()[i] * (x.data()[i] - mean) * istd;
                    dx.data_mut()[i] = g * istd * dy.data()[i];
                }
                dgamma.data_mut()[ch] = sdyx;
                dbeta.data_mut()[ch] = sdy;
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

/// Max pooling; padded cells never win. Returns the output and, per output
/// cell, the flat input index of the winning element (first maximum in
/// row-major window order).
pub(crate) fn maxpool_forward(x: &Tensor, g: PoolGeom) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(config_err!("maxpool: kernel and stride must be positive"));
    }
    if kh > h + 2 * ph || kw > w + 2 * pw {
        return Err(config_err!(
            "maxpool: kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * ph,
            w + 2 * pw
        ));
    }
    if ph >= kh || pw >= kw {
        return Err(config_err!("maxpool: padding {ph}x{pw} must be smaller than kernel {kh}x{kw}"));
    }
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for i in 0..kh {
                    let y = (oy * sh + i) as isize - ph as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for j in 0..kw {
                        let xx = (ox * sw + j) as isize - pw as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let idx = base + y as usize * w + xx as usize;
                        let v = x.data()[idx];
                        if best_i == usize::MAX || v > best {
                            best = v;
                            best_i = idx;
                        }
                    }
                }
                out.data_mut()[o] = best;
                arg[o] = best_i;
                o += 1;
            }
        }
    }
    Ok((out, arg))
}

pub(crate) fn global_avgpool_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let data = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Tensor::new(vec![n, c, 1, 1], data)
}

/// Nearest-neighbour source index along one axis (floor(dst * src / dst_len)).
pub(crate) fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (dst * src_len / dst_len).min(src_len - 1)
}

pub(crate) fn resize_nearest_forward(x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if th == 0 || tw == 0 {
        return Err(config_err!("resize: target size {th}x{tw} must be positive"));
    }
    let mut out = Tensor::zeros(&[n, c, th, tw]);
    let cols: Vec<usize> = (0..tw).map(|j| nearest_index(j, w, tw)).collect();
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * th * tw..(plane + 1) * th * tw];
        for i in 0..th {
            let sy = nearest_index(i, h, th);
            for j in 0..tw {
                dst[i * tw + j] = src[sy * w + cols[j]];
            }
        }
    }
    Ok(out)
}

pub(crate) fn resize_nearest_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (th, tw) = (dy.shape()[2], dy.shape()[3]);
    let mut dx = Tensor::zeros(x_shape);
    for plane in 0..n * c {
        let src = &dy.data()[plane * th * tw..(plane + 1) * th * tw];
        let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for i in 0..th {
            let sy = nearest_index(i, h, th);
            for j in 0..tw {
                dst[sy * w + nearest_index(j, w, tw)] += src[i * tw + j];
            }
        }
    }
    dx
}

pub(crate) fn concat_channels_forward(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for t in xs {
        let (tn, tc, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(shape_err!(
                "concat: extents {:?} do not match {:?} outside the channel axis",
                t.shape(),
                first.shape()
            ));
        }
        total_c += tc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total_c * hw);
    for b in 0..n {
        for t in xs {
            let tc = t.shape()[1];
            data.extend_from_slice(&t.data()[b * tc * hw..(b + 1) * tc * hw]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], data)
}

pub(crate) fn slice_channels_forward(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if len == 0 || start + len > c {
        return Err(shape_err!("channel slice {start}..{} out of range for {c} channels", start + len));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        data.extend_from_slice(&x.data()[(b * c + start) * hw..(b * c + start + len) * hw]);
    }
    Tensor::new(vec![n, len, h, w], data)
}

/// Adds `dy` (a channel slice) back into a zero tensor of the full shape.
pub(crate) fn slice_channels_backward(x_shape: &[usize], start: usize, dy: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let len = dy.shape()[1];
    let hw = h * w;
    let mut dx = Tensor::zeros(x_shape);
    for b in 0..n {
        dx.data_mut()[(b * c + start) * hw..(b * c + start + len) * hw]
            .copy_from_slice(&dy.data()[b * len * hw..(b + 1) * len * hw]);
    }
    dx
}

/// Every second row and column, starting at `(row, col)`.
pub(crate) fn stride2_slice_forward(x: &Tensor, row: usize, col: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if row > 1 || col > 1 {
        return Err(config_err!("stride-2 slice offsets must be 0 or 1, got ({row}, {col})"));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(config_err!("stride-2 slice needs even spatial extents, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                out.data_mut()[(plane * oh + i) * ow + j] = x.data()[(plane * h + 2 * i + row) * w + 2 * j + col];
            }
        }
    }
    Ok(out)
}

pub(crate) fn stride2_slice_backward(x_shape: &[usize], row: usize, col: usize, dy: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(x_shape);
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                dx.data_mut()[(plane * h + 2 * i + row) * w + 2 * j + col] = dy.data()[(plane * oh + i) * ow + j];
            }
        }
    }
    dx
}
