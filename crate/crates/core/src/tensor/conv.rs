use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dConfig {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dConfig {
            stride,
            padding,
            dilation,
        }
    }
}

/// Output extent of a sliding window: `floor((h + 2p - f_eff) / s) + 1` with
/// `f_eff = dilation * (f - 1) + 1`. Returns `None` when the window does not fit.
pub fn conv_out_extent(h: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return None;
    }
    let eff = dilation * (kernel - 1) + 1;
    let padded = h + 2 * padding;
    if padded < eff {
        return None;
    }
    Some((padded - eff) / stride + 1)
}

/// Validated geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub cfg: Conv2dConfig,
}

impl ConvGeom {
    pub fn new(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, cfg: Conv2dConfig) -> Result<Self> {
        let (n, c, h, w) = input.dims4()?;
        let (o, wc, kh, kw) = weight
            .dims4()
            .map_err(|_| shape_err!("conv2d weight must be OIHW, got {:?}", weight.shape()))?;
        if wc != c {
            return Err(shape_err!(
                "conv2d: input has {c} channels but weight expects {wc} (weight shape {:?})",
                weight.shape()
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(shape_err!("conv2d: bias shape {:?} does not match {o} output channels", b.shape()));
            }
        }
        if cfg.stride == 0 || cfg.dilation == 0 {
            return Err(config_err!("conv2d: stride and dilation must be positive"));
        }
        let oh = conv_out_extent(h, kh, cfg.stride, cfg.padding, cfg.dilation);
        let ow = conv_out_extent(w, kw, cfg.stride, cfg.padding, cfg.dilation);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok(ConvGeom {
                n,
                c,
                h,
                w,
                o,
                kh,
                kw,
                oh,
                ow,
                cfg,
            }),
            _ => Err(config_err!(
                "conv2d: kernel {kh}x{kw} (dilation {}, padding {}, stride {}) yields no output on {h}x{w} input",
                cfg.dilation,
                cfg.padding,
                cfg.stride
            )),
        }
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.cfg.stride == 1 && self.cfg.padding == 0
    }
}

fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let (s, pad, d) = (g.cfg.stride as isize, g.cfg.padding as isize, g.cfg.dilation as isize);
    let p = g.p();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let y = oy as isize * s - pad + ki as isize * d;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let x = ox as isize * s - pad + kj as isize * d;
                        *v = if x >= 0 && x < g.w as isize { src[x as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let (s, pad, d) = (g.cfg.stride as isize, g.cfg.padding as isize, g.cfg.dilation as isize);
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let y = oy as isize * s - pad + ki as isize * d;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let x = ox as isize * s - pad + kj as isize * d;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha * a[m×k] · b[k×n] + beta * c`, with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the debug assertions above describe the extents every caller
    // guarantees; matrixmultiply only reads/writes inside those strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (k, p) = (g.k(), g.p());
    let mut out = Tensor::zeros(&[g.n, g.o, g.oh, g.ow]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let in_len = g.c * g.h * g.w;
    for n in 0..g.n {
        let img = &input.data()[n * in_len..(n + 1) * in_len];
        let b: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[n * g.o * p..(n + 1) * g.o * p];
        gemm(g.o, k, p, weight.data(), (k, 1), b, (p, 1), 0.0, dst);
        if let Some(bias) = bias {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                let bv = bias.data()[o];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)` for upstream gradient `dout`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (k, p) = (g.k(), g.p());
    let in_len = g.c * g.h * g.w;
    let mut dinput = need_input.then(|| Tensor::zeros(&[g.n, g.c, g.h, g.w]));
    let mut dweight = need_weight.then(|| Tensor::zeros(&[g.o, g.c, g.kh, g.kw]));
    let mut dbias = need_bias.then(|| Tensor::zeros(&[g.o]));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = if need_input && !g.is_pointwise() { vec![0.0; k * p] } else { Vec::new() };
    for n in 0..g.n {
        let dy = &dout.data()[n * g.o * p..(n + 1) * g.o * p];
        if let Some(db) = dbias.as_mut() {
            for (o, row) in dy.chunks(p).enumerate() {
                db.data_mut()[o] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dweight.as_mut() {
            let img = &input.data()[n * in_len..(n + 1) * in_len];
            let b: &[f64] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            // dW[o×k] += dY[o×p] · colsᵀ[p×k]
            gemm(g.o, p, k, dy, (p, 1), b, (1, p), 1.0, dw.data_mut());
        }
        if let Some(dx) = dinput.as_mut() {
            let dst = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
            // dcols[k×p] = Wᵀ[k×o] · dY[o×p]
            if g.is_pointwise() {
                gemm(k, g.o, p, weight.data(), (1, k), dy, (p, 1), 0.0, dst);
            } else {
                gemm(k, g.o, p, weight.data(), (1, k), dy, (p, 1), 0.0, &mut dcols);
                col2im(g, &dcols, dst);
            }
        }
    }
    (dinput, dweight, dbias)
}
