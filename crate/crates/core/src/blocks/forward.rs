use std::collections::BTreeMap;

use crate::error::{config_err, Result};
use crate::tensor::{Activation, BatchNormConfig, BnMode, Conv2dConfig, RunningStats, Tape, Var};

use super::cio::spp_params;
use super::graph::ModelGraph;
use super::params::ParamStore;
use super::LayerSpec;

/// Binds a [`ParamStore`] to one tape for one forward pass.
///
/// Parameters are placed on the tape on first use, so parameters shared by
/// unrolled steps map to a single tape leaf and their gradients add up.
/// Batch-norm running statistics are threaded through every use in order
/// and collected for the caller to write back.
pub struct Session<'a> {
    store: &'a ParamStore,
    mode: BnMode,
    trainable: bool,
    bn: BatchNormConfig,
    vars: BTreeMap<String, Var>,
    running: BTreeMap<String, RunningStats>,
}

impl<'a> Session<'a> {
    /// Training session: batch statistics, parameters tracked for gradients.
    pub fn train(store: &'a ParamStore) -> Self {
        Self::new(store, BnMode::Train, true)
    }

    /// Inference session: running statistics, no gradients.
    pub fn infer(store: &'a ParamStore) -> Self {
        Self::new(store, BnMode::Infer, false)
    }

    pub fn new(store: &'a ParamStore, mode: BnMode, trainable: bool) -> Self {
        Session {
            store,
            mode,
            trainable,
            bn: BatchNormConfig::default(),
            vars: BTreeMap::new(),
            running: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = if self.trainable {
            tape.param(value)
        } else {
            tape.constant(value)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Tape leaves of every parameter used so far.
    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Updated running statistics, keyed by batch-norm prefix.
    pub fn running_updates(&self) -> &BTreeMap<String, RunningStats> {
        &self.running
    }

    pub fn into_running_updates(self) -> BTreeMap<String, RunningStats> {
        self.running
    }

    fn batchnorm(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(tape, &format!("{prefix}.gamma"))?;
        let beta = self.param(tape, &format!("{prefix}.beta"))?;
        let running = match self.running.get(prefix) {
            Some(r) => r.clone(),
            None => self.store.running(prefix)?,
        };
        let (y, updated) = tape.batchnorm(x, gamma, beta, &running, self.mode, self.bn)?;
        if let Some(r) = updated {
            self.running.insert(prefix.to_string(), r);
        }
        Ok(y)
    }
}

/// Convolution (no bias), batch norm, activation.
pub fn cbl_forward(
    tape: &mut Tape,
    sess: &mut Session,
    prefix: &str,
    x: Var,
    cfg: Conv2dConfig,
    act: Activation,
) -> Result<Var> {
    let w = sess.param(tape, &format!("{prefix}.conv.weight"))?;
    let y = tape.conv2d(x, w, None, cfg)?;
    let y = sess.batchnorm(tape, &format!("{prefix}.bn"), y)?;
    Ok(tape.activation(y, act))
}

/// Space-to-channel slicing: offsets (0,0), (1,0), (0,1), (1,1) stacked on
/// the channel axis.
pub fn focus_slice(tape: &mut Tape, x: Var) -> Result<Var> {
    let (_, _, h, w) = tape.value(x).dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(config_err!("focus needs even spatial extents, got {h}x{w}"));
    }
    let parts = [(0, 0), (1, 0), (0, 1), (1, 1)]
        .iter()
        .map(|&(r, c)| tape.stride2_slice(x, r, c))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&parts)
}

pub fn focus_forward(tape: &mut Tape, sess: &mut Session, prefix: &str, x: Var, kernel: usize, act: Activation) -> Result<Var> {
    let s = focus_slice(tape, x)?;
    cbl_forward(tape, sess, prefix, s, Conv2dConfig::new(1, kernel / 2, 1), act)
}

/// Cross-stage-partial dense block. The first half of the channels skips
/// straight to the merge transition; the second half feeds `m` dense layers
/// of growth `d` and a 1×1 transition.
#[allow(clippy::too_many_arguments)]
pub fn csp_dense_forward(
    tape: &mut Tape,
    sess: &mut Session,
    prefix: &str,
    x0: Var,
    layers: usize,
    out: usize,
    act: Activation,
    transition_act: Activation,
) -> Result<Var> {
    let (_, c, _, _) = tape.value(x0).dims4()?;
    if c % 2 != 0 {
        return Err(config_err!("csp_dense {prefix:?}: input channels {c} must be even"));
    }
    if layers == 0 {
        return Err(config_err!("csp_dense {prefix:?}: needs at least one dense layer"));
    }
    let skip = tape.slice_channels(x0, 0, c / 2)?;
    let mut dense = vec![tape.slice_channels(x0, c / 2, c / 2)?];
    for k in 0..layers {
        let input = if dense.len() == 1 { dense[0] } else { tape.concat(&dense)? };
        let y = cbl_forward(tape, sess, &format!("{prefix}.dense{k}"), input, Conv2dConfig::new(1, 1, 1), act)?;
        dense.push(y);
    }
    let all = tape.concat(&dense)?;
    let xt = cbl_forward(tape, sess, &format!("{prefix}.transition"), all, Conv2dConfig::default(), transition_act)?;
    let merged = tape.concat(&[skip, xt])?;
    let xu = cbl_forward(tape, sess, &format!("{prefix}.merge"), merged, Conv2dConfig::default(), transition_act)?;
    let got = tape.value(xu).dims4()?.1;
    if got != out {
        return Err(config_err!("csp_dense {prefix:?}: produced {got} channels, declared {out}"));
    }
    Ok(xu)
}

/// In-graph SPP kernel for `n` bins over extent `h`: the adaptive-bin
/// kernel, bumped to the next odd size so that stride-1 pooling with
/// padding `k/2` keeps the extent.
pub fn spp_kernel(h: usize, n: usize) -> Result<usize> {
    let k = spp_params(h, n)?.kernel;
    Ok(if k % 2 == 0 { k + 1 } else { k })
}

/// Same-size max pools, one per bin, concatenated after the input.
pub fn spp_forward(tape: &mut Tape, x: Var, bins: &[usize]) -> Result<Var> {
    if bins.is_empty() {
        return Err(config_err!("spp needs at least one bin"));
    }
    let (_, _, h, w) = tape.value(x).dims4()?;
    let mut parts = vec![x];
    for &n in bins {
        let (kh, kw) = (spp_kernel(h, n)?, spp_kernel(w, n)?);
        parts.push(tape.maxpool2d_rect(x, (kh, kw), (1, 1), (kh / 2, kw / 2))?);
    }
    tape.concat(&parts)
}

/// Atrous spatial pyramid pooling with four `C/4` branches:
/// 1×1 rate 1, 3×3 rate 3, 3×3 rate 6, and global pooling; no output conv.
pub fn aspp_forward(tape: &mut Tape, sess: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let (_, c, h, w) = tape.value(x).dims4()?;
    if c % 4 != 0 {
        return Err(config_err!("aspp {prefix:?}: channel count {c} must be divisible by 4"));
    }
    let mut parts = Vec::with_capacity(4);
    for (b, pad, rate) in [(0, 0, 1), (1, 3, 3), (2, 6, 6)] {
        let wt = sess.param(tape, &format!("{prefix}.branch{b}.weight"))?;
        let bias = sess.param(tape, &format!("{prefix}.branch{b}.bias"))?;
        let y = tape.conv2d(x, wt, Some(bias), Conv2dConfig::new(1, pad, rate))?;
        parts.push(tape.activation(y, Activation::Relu));
    }
    let pooled = tape.global_avgpool(x)?;
    let wt = sess.param(tape, &format!("{prefix}.pool.weight"))?;
    let bias = sess.param(tape, &format!("{prefix}.pool.bias"))?;
    let y = tape.conv2d(pooled, wt, Some(bias), Conv2dConfig::default())?;
    let y = tape.activation(y, Activation::Relu);
    parts.push(tape.resize_nearest(y, h, w)?);
    tape.concat(&parts)
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Output of every graph node, by node index.
    pub nodes: Vec<Var>,
    /// Raw head outputs, finest stride first.
    pub heads: Vec<Var>,
}

/// Runs an unrolled (or feedback-free) graph on `input`.
pub fn forward(graph: &ModelGraph, sess: &mut Session, tape: &mut Tape, input: Var) -> Result<ForwardOutput> {
    if graph.has_feedback() {
        return Err(config_err!("graph has feedback edges; unroll it before running"));
    }
    let mut vars: Vec<Var> = Vec::with_capacity(graph.nodes().len());
    for node in graph.nodes() {
        let ins: Vec<Var> = node.inputs.iter().map(|&j| vars[j]).collect();
        let key = node.param_key.as_str();
        let v = match &node.spec {
            LayerSpec::Input { channels } => {
                let c = tape.value(input).dims4()?.1;
                if c != *channels {
                    return Err(config_err!("input has {c} channels, graph expects {channels}"));
                }
                input
            }
            LayerSpec::Focus { kernel, act, .. } => focus_forward(tape, sess, key, ins[0], *kernel, *act)?,
            LayerSpec::Cbl {
                kernel: _,
                stride,
                padding,
                dilation,
                act,
                ..
            } => cbl_forward(tape, sess, key, ins[0], Conv2dConfig::new(*stride, *padding, *dilation), *act)?,
            LayerSpec::CspDense {
                out,
                layers,
                act,
                transition_act,
                ..
            } => csp_dense_forward(tape, sess, key, ins[0], *layers, *out, *act, *transition_act)?,
            LayerSpec::Spp { bins } => spp_forward(tape, ins[0], bins)?,
            LayerSpec::Aspp => aspp_forward(tape, sess, key, ins[0])?,
            LayerSpec::RfpFuse => match ins[..] {
                [x] => x,
                [x, r] => {
                    let w = sess.param(tape, &format!("{key}.proj.weight"))?;
                    let p = tape.conv2d(r, w, None, Conv2dConfig::default())?;
                    tape.add(x, p)?
                }
                _ => return Err(config_err!("rfp_fuse {:?} takes one or two inputs", node.name)),
            },
            LayerSpec::Upsample { factor } => {
                let (_, _, h, w) = tape.value(ins[0]).dims4()?;
                tape.resize_nearest(ins[0], h * factor, w * factor)?
            }
            LayerSpec::Concat => tape.concat(&ins)?,
            LayerSpec::DetectHead { .. } => {
                let w = sess.param(tape, &format!("{key}.weight"))?;
                let b = sess.param(tape, &format!("{key}.bias"))?;
                tape.conv2d(ins[0], w, Some(b), Conv2dConfig::default())?
            }
        };
        vars.push(v);
    }
    let heads = graph.heads().iter().map(|&h| vars[h]).collect();
    Ok(ForwardOutput { nodes: vars, heads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::params::{block_params, init_params};
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;

    fn store_for(spec: &LayerSpec, prefix: &str, cin: usize) -> ParamStore {
        let infos: BTreeMap<_, _> = block_params(spec, prefix, cin, None).unwrap().into_iter().collect();
        init_params(&infos, 3)
    }

    #[test]
    fn focus_smallest_case_is_a_permutation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = focus_slice(&mut tape, x).unwrap();
        // [[a,b],[c,d]] -> a, c, b, d
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(tape.value(y).shape(), &[1, 4, 1, 1]);
    }

    #[test]
    fn focus_rejects_odd_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 5, 4]));
        assert!(focus_slice(&mut tape, x).is_err());
    }

    #[test]
    fn csp_channel_bookkeeping() {
        let spec = LayerSpec::CspDense {
            out: 64,
            layers: 2,
            growth: 16,
            act: Activation::Mish,
            transition_act: Activation::leaky(),
        };
        let store = store_for(&spec, "csp", 64);
        assert_eq!(store.get("csp.dense0.conv.weight").unwrap().shape(), &[16, 32, 3, 3]);
        assert_eq!(store.get("csp.dense1.conv.weight").unwrap().shape(), &[16, 48, 3, 3]);
        assert_eq!(store.get("csp.transition.conv.weight").unwrap().shape(), &[32, 64, 1, 1]);
        assert_eq!(store.get("csp.merge.conv.weight").unwrap().shape(), &[64, 64, 1, 1]);
        let mut tape = Tape::new();
        let mut sess = Session::train(&store);
        let x = tape.constant(Tensor::from_fn(&[2, 64, 4, 4], |i| (i as f64 * 0.37).sin()));
        let y = csp_dense_forward(&mut tape, &mut sess, "csp", x, 2, 64, Activation::Mish, Activation::leaky()).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 64, 4, 4]);
        assert!(tape.value(y).is_finite());
        assert_eq!(sess.running_updates().len(), 4);
    }

    #[test]
    fn spp_channels_and_identities() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 8, 13, 13], |i| (i % 17) as f64));
        let y = spp_forward(&mut tape, x, &[1, 2, 4]).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 32, 13, 13]);
        let x1 = tape.constant(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64));
        let y1 = spp_forward(&mut tape, x1, &[3]).unwrap();
        let d = tape.value(y1).data();
        assert_eq!(&d[..18], &d[18..]);
        let flat = tape.constant(Tensor::full(&[1, 2, 5, 5], 2.5));
        let yf = spp_forward(&mut tape, flat, &[1, 2]).unwrap();
        assert!(tape.value(yf).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn aspp_preserves_shape_and_rejects_bad_channels() {
        let store = store_for(&LayerSpec::Aspp, "r", 8);
        let mut tape = Tape::new();
        let mut sess = Session::infer(&store);
        let x = tape.constant(Tensor::from_fn(&[1, 8, 7, 7], |i| (i as f64).cos()));
        let y = aspp_forward(&mut tape, &mut sess, "r", x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 8, 7, 7]);
        let bad = tape.constant(Tensor::zeros(&[1, 6, 7, 7]));
        let err = aspp_forward(&mut tape, &mut sess, "r", bad).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"));
    }

    #[test]
    fn aspp_pool_branch_is_constant_on_constant_input() {
        let store = store_for(&LayerSpec::Aspp, "r", 4);
        let mut tape = Tape::new();
        let mut sess = Session::infer(&store);
        let x = tape.constant(Tensor::full(&[1, 4, 5, 5], 0.7));
        let y = aspp_forward(&mut tape, &mut sess, "r", x).unwrap();
        let pool = &tape.value(y).data()[3 * 25..];
        assert!(pool.iter().all(|&v| v == pool[0]));
    }
}
