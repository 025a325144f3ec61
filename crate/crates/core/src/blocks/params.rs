use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{RunningStats, Tensor};

use super::graph::Node;
use super::LayerSpec;

/// Initial objectness probability encoded in the head bias.
pub const PRIOR_OBJECTNESS: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel; the only kind that receives weight decay.
    Weight,
    Bias,
    /// Batch-norm scale or shift.
    Norm,
    /// Running statistic, updated outside gradient descent.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decayed(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Zeros,
    Ones,
    /// Detection bias: objectness at the prior, everything else zero.
    HeadBias { per_anchor: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
}

fn conv_weight(out: &mut Vec<(String, ParamInfo)>, name: String, o: usize, i: usize, k: usize) {
    let fan_in = (i * k * k) as f64;
    out.push((
        name,
        ParamInfo {
            shape: vec![o, i, k, k],
            kind: ParamKind::Weight,
            init: Init::Uniform(1.0 / fan_in.sqrt()),
        },
    ));
}

fn conv_bias(out: &mut Vec<(String, ParamInfo)>, name: String, o: usize, fan_in: usize) {
    out.push((
        name,
        ParamInfo {
            shape: vec![o],
            kind: ParamKind::Bias,
            init: Init::Uniform(1.0 / (fan_in as f64).sqrt()),
        },
    ));
}

fn cbl_params(out: &mut Vec<(String, ParamInfo)>, prefix: &str, cin: usize, cout: usize, k: usize) {
    conv_weight(out, format!("{prefix}.conv.weight"), cout, cin, k);
    for (name, kind, init) in [
        ("bn.gamma", ParamKind::Norm, Init::Ones),
        ("bn.beta", ParamKind::Norm, Init::Zeros),
        ("bn.running_mean", ParamKind::Buffer, Init::Zeros),
        ("bn.running_var", ParamKind::Buffer, Init::Ones),
    ] {
        out.push((
            format!("{prefix}.{name}"),
            ParamInfo {
                shape: vec![cout],
                kind,
                init,
            },
        ));
    }
}

/// Parameter layout of one block with input channels `cin` (and `feedback`
/// channels for a fuse node).
pub(crate) fn block_params(spec: &LayerSpec, prefix: &str, cin: usize, feedback: Option<usize>) -> Result<Vec<(String, ParamInfo)>> {
    let mut out = Vec::new();
    match spec {
        LayerSpec::Focus { out: cout, kernel, .. } => cbl_params(&mut out, prefix, 4 * cin, *cout, *kernel),
        LayerSpec::Cbl { out: cout, kernel, .. } => cbl_params(&mut out, prefix, cin, *cout, *kernel),
        LayerSpec::CspDense {
            out: cout,
            layers,
            growth,
            ..
        } => {
            let half = cin / 2;
            for k in 0..*layers {
                cbl_params(&mut out, &format!("{prefix}.dense{k}"), half + k * growth, *growth, 3);
            }
            cbl_params(&mut out, &format!("{prefix}.transition"), half + layers * growth, cout / 2, 1);
            cbl_params(&mut out, &format!("{prefix}.merge"), half + cout / 2, *cout, 1);
        }
        LayerSpec::Aspp => {
            let q = cin / 4;
            for (b, k) in [(0, 1), (1, 3), (2, 3)] {
                conv_weight(&mut out, format!("{prefix}.branch{b}.weight"), q, cin, k);
                conv_bias(&mut out, format!("{prefix}.branch{b}.bias"), q, cin * k * k);
            }
            conv_weight(&mut out, format!("{prefix}.pool.weight"), q, cin, 1);
            conv_bias(&mut out, format!("{prefix}.pool.bias"), q, cin);
        }
        LayerSpec::RfpFuse => {
            let r = feedback.ok_or_else(|| config_err!("rfp_fuse {prefix:?} has no feedback source"))?;
            out.push((
                format!("{prefix}.proj.weight"),
                ParamInfo {
                    shape: vec![cin, r, 1, 1],
                    kind: ParamKind::Weight,
                    init: Init::Zeros,
                },
            ));
        }
        LayerSpec::DetectHead { anchors, classes } => {
            let o = anchors * (5 + classes);
            conv_weight(&mut out, format!("{prefix}.weight"), o, cin, 1);
            out.push((
                format!("{prefix}.bias"),
                ParamInfo {
                    shape: vec![o],
                    kind: ParamKind::Bias,
                    init: Init::HeadBias { per_anchor: 5 + classes },
                },
            ));
        }
        LayerSpec::Input { .. } | LayerSpec::Spp { .. } | LayerSpec::Upsample { .. } | LayerSpec::Concat => {}
    }
    Ok(out)
}

pub(crate) fn param_infos(nodes: &[Node], channels: &[usize]) -> Result<BTreeMap<String, ParamInfo>> {
    let mut map = BTreeMap::new();
    for node in nodes {
        let cin = node.inputs.first().map_or(0, |&j| channels[j]);
        let feedback = node.feedback.or_else(|| node.inputs.get(1).copied()).map(|j| channels[j]);
        for (name, info) in block_params(&node.spec, &node.param_key, cin, feedback)? {
            if let Some(prev) = map.get(&name) {
                if prev != &info {
                    return Err(config_err!("parameter {name:?} declared twice with different shapes"));
                }
            }
            map.insert(name, info);
        }
    }
    Ok(map)
}

/// Named parameter values, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    infos: BTreeMap<String, ParamInfo>,
}

/// Draws every parameter in name order from one seeded stream.
pub fn init_params(infos: &BTreeMap<String, ParamInfo>, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = infos
        .iter()
        .map(|(name, info)| {
            let t = match info.init {
                Init::Uniform(b) => Tensor::from_fn(&info.shape, |_| rng.gen_range(-b..=b)),
                Init::Zeros => Tensor::zeros(&info.shape),
                Init::Ones => Tensor::full(&info.shape, 1.0),
                Init::HeadBias { per_anchor } => {
                    let prior = (PRIOR_OBJECTNESS / (1.0 - PRIOR_OBJECTNESS)).ln();
                    Tensor::from_fn(&info.shape, |i| if i % per_anchor == 4 { prior } else { 0.0 })
                }
            };
            (name.clone(), t)
        })
        .collect();
    ParamStore {
        values,
        infos: infos.clone(),
    }
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| config_err!("parameter {name:?} is not in the store"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.values
            .get_mut(name)
            .ok_or_else(|| config_err!("parameter {name:?} is not in the store"))
    }

    pub fn info(&self, name: &str) -> Option<&ParamInfo> {
        self.infos.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Trainable scalar count.
    pub fn count(&self) -> usize {
        self.values
            .iter()
            .filter(|(n, _)| self.infos[*n].kind.trainable())
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Running statistics of the batch norm under `prefix`.
    pub fn running(&self, prefix: &str) -> Result<RunningStats> {
        Ok(RunningStats {
            mean: self.get(&format!("{prefix}.running_mean"))?.clone(),
            var: self.get(&format!("{prefix}.running_var"))?.clone(),
        })
    }

    pub fn set_running(&mut self, prefix: &str, stats: RunningStats) -> Result<()> {
        *self.get_mut(&format!("{prefix}.running_mean"))? = stats.mean;
        *self.get_mut(&format!("{prefix}.running_var"))? = stats.var;
        Ok(())
    }

    /// Rounds every value through `f32`, as a checkpoint round trip would.
    pub fn round_to_f32(&mut self) {
        self.values.values_mut().for_each(Tensor::round_to_f32);
    }

    pub fn to_checkpoint(&self, meta: Vec<(String, String)>) -> Checkpoint {
        Checkpoint {
            meta,
            tensors: self.values.iter().map(|(n, t)| (n.clone(), t.clone())).collect(),
        }
    }

    /// Loads values for `infos` from a checkpoint; names and shapes must
    /// match exactly.
    pub fn from_checkpoint(ck: &Checkpoint, infos: &BTreeMap<String, ParamInfo>) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (name, t) in &ck.tensors {
            let info = infos
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name:?} does not belong to this graph")))?;
            if t.shape() != info.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, graph expects {:?}",
                    t.shape(),
                    info.shape
                )));
            }
            values.insert(name.clone(), t.clone());
        }
        if let Some(missing) = infos.keys().find(|k| !values.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("checkpoint lacks tensor {missing:?}")));
        }
        Ok(ParamStore {
            values,
            infos: infos.clone(),
        })
    }
}
