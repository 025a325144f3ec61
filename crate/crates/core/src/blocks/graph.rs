use std::collections::{BTreeMap, HashMap};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::conv_out_extent;

use super::forward::spp_kernel;
use super::params::{param_infos, ParamInfo};
use super::LayerSpec;

/// Where a node sits in the detector. Levels count pyramid scales from the
/// finest (stride 8) upward, starting at 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    /// Input, focus and anything before the first pyramid level.
    Stem,
    /// Backbone stage `B_i`.
    Backbone(usize),
    /// Top-down pyramid op `F_i`.
    Pyramid(usize),
    /// Connecting module `R_i`.
    Connect(usize),
    Head(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub spec: LayerSpec,
    pub inputs: Vec<usize>,
    /// Recurrent edge from a later node; only in graphs that are not unrolled.
    pub feedback: Option<usize>,
    pub role: Role,
    /// Parameter-store prefix; unrolled copies share their original's key.
    pub param_key: String,
    /// Unroll step (1-based); 0 for nodes shared by every step.
    pub step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// A directed graph of blocks with one input and a detection head per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    nodes: Vec<Node>,
    input: usize,
    heads: Vec<usize>,
    params: BTreeMap<String, ParamInfo>,
    steps: usize,
}

/// Collects nodes by name; edges may reference nodes added later.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<(String, LayerSpec, Vec<String>, Option<String>, Role)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, spec: LayerSpec, inputs: &[&str], role: Role) -> &mut Self {
        self.nodes.push((
            name.to_string(),
            spec,
            inputs.iter().map(|s| s.to_string()).collect(),
            None,
            role,
        ));
        self
    }

    /// Marks `from` as feeding back into `to` across unroll steps.
    pub fn feedback(&mut self, to: &str, from: &str) -> Result<&mut Self> {
        let node = self
            .nodes
            .iter_mut()
            .find(|n| n.0 == to)
            .ok_or_else(|| config_err!("feedback target {to:?} is not a node"))?;
        node.3 = Some(from.to_string());
        Ok(self)
    }

    /// Resolves names, orders nodes topologically and derives parameter shapes.
    pub fn finish(&self, heads: &[&str]) -> Result<ModelGraph> {
        let mut index = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.0.as_str(), i).is_some() {
                return Err(config_err!("duplicate node name {:?}", n.0));
            }
        }
        let lookup = |name: &str, user: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| config_err!("node {user:?} references unknown node {name:?}"))
        };
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (name, spec, inputs, feedback, role) in &self.nodes {
            spec.validate().map_err(|e| config_err!("node {name:?}: {e}"))?;
            nodes.push(Node {
                name: name.clone(),
                spec: spec.clone(),
                inputs: inputs.iter().map(|s| lookup(s, name)).collect::<Result<_>>()?,
                feedback: feedback.as_deref().map(|s| lookup(s, name)).transpose()?,
                role: *role,
                param_key: name.clone(),
                step: 0,
            });
        }
        let heads = heads.iter().map(|h| lookup(h, "heads")).collect::<Result<Vec<_>>>()?;
        ModelGraph::from_nodes(nodes, heads, None, 0)
    }
}

/// Kahn's algorithm, taking the lowest-indexed ready node first.
fn topo_order(nodes: &[Node]) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut indegree = vec![0usize; n];
    let mut users = vec![Vec::new(); n];
    for (i, node) in nodes.iter().enumerate() {
        for &j in &node.inputs {
            indegree[i] += 1;
            users[j].push(i);
        }
    }
    let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &u in &users[i] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.insert(u);
            }
        }
    }
    if order.len() != n {
        let stuck: Vec<&str> = (0..n)
            .filter(|i| !order.contains(i))
            .map(|i| nodes[i].name.as_str())
            .collect();
        return Err(config_err!("graph has a cycle through {stuck:?}"));
    }
    Ok(order)
}

impl ModelGraph {
    pub fn builder() -> GraphBuilder {
        GraphBuilder::new()
    }

    fn from_nodes(
        nodes: Vec<Node>,
        heads: Vec<usize>,
        params: Option<BTreeMap<String, ParamInfo>>,
        steps: usize,
    ) -> Result<Self> {
        let order = topo_order(&nodes)?;
        let mut position = vec![0; nodes.len()];
        for (p, &i) in order.iter().enumerate() {
            position[i] = p;
        }
        let mut sorted: Vec<Node> = order.iter().map(|&i| nodes[i].clone()).collect();
        for node in &mut sorted {
            node.inputs.iter_mut().for_each(|j| *j = position[*j]);
            if let Some(f) = node.feedback.as_mut() {
                *f = position[*f];
            }
        }
        let heads: Vec<usize> = heads.iter().map(|&h| position[h]).collect();
        let inputs: Vec<usize> = (0..sorted.len())
            .filter(|&i| matches!(sorted[i].spec, LayerSpec::Input { .. }))
            .collect();
        if inputs.len() != 1 {
            return Err(config_err!("graph needs exactly one input node, found {}", inputs.len()));
        }
        if heads.is_empty() {
            return Err(config_err!("graph has no detection heads"));
        }
        for &h in &heads {
            if !matches!(sorted[h].spec, LayerSpec::DetectHead { .. }) {
                return Err(config_err!("head {:?} is not a detect_head node", sorted[h].name));
            }
        }
        let mut graph = ModelGraph {
            nodes: sorted,
            input: inputs[0],
            heads,
            params: BTreeMap::new(),
            steps,
        };
        let channels = graph.channels()?;
        graph.params = match params {
            Some(p) => p,
            None => param_infos(&graph.nodes, &channels)?,
        };
        Ok(graph)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn input(&self) -> usize {
        self.input
    }

    /// Detection heads, finest stride first.
    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    /// Unroll count; 0 for a graph that has not been through [`rfp_unroll`].
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn params(&self) -> &BTreeMap<String, ParamInfo> {
        &self.params
    }

    /// Trainable scalar count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.kind.trainable())
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// All data edges as (producer, consumer).
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            out.extend(n.inputs.iter().map(|&j| (j, i)));
        }
        out
    }

    pub fn has_feedback(&self) -> bool {
        self.nodes.iter().any(|n| n.feedback.is_some())
    }

    /// Output channel count of every node.
    pub fn channels(&self) -> Result<Vec<usize>> {
        let mut ch: Vec<usize> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<usize> = node.inputs.iter().map(|&j| ch[j]).collect();
            let arity = |lo: usize, hi: usize| {
                if ins.len() < lo || ins.len() > hi {
                    Err(config_err!(
                        "node {:?} ({}) takes {lo}..={hi} inputs, got {}",
                        node.name,
                        node.spec.kind(),
                        ins.len()
                    ))
                } else {
                    Ok(())
                }
            };
            let c = match &node.spec {
                LayerSpec::Input { channels } => {
                    arity(0, 0)?;
                    *channels
                }
                LayerSpec::Focus { out, .. } | LayerSpec::Cbl { out, .. } => {
                    arity(1, 1)?;
                    *out
                }
                LayerSpec::CspDense { out, .. } => {
                    arity(1, 1)?;
                    if ins[0] % 2 != 0 {
                        return Err(config_err!(
                            "node {:?}: csp_dense needs an even input channel count, got {}",
                            node.name,
                            ins[0]
                        ));
                    }
                    *out
                }
                LayerSpec::Spp { bins } => {
                    arity(1, 1)?;
                    ins[0] * (1 + bins.len())
                }
                LayerSpec::Aspp => {
                    arity(1, 1)?;
                    if ins[0] % 4 != 0 {
                        return Err(config_err!(
                            "node {:?}: aspp needs channels divisible by 4, got {}",
                            node.name,
                            ins[0]
                        ));
                    }
                    ins[0]
                }
                LayerSpec::RfpFuse => {
                    arity(1, 2)?;
                    ins[0]
                }
                LayerSpec::Upsample { .. } => {
                    arity(1, 1)?;
                    ins[0]
                }
                LayerSpec::Concat => {
                    arity(1, usize::MAX)?;
                    ins.iter().sum()
                }
                LayerSpec::DetectHead { anchors, classes } => {
                    arity(1, 1)?;
                    anchors * (5 + classes)
                }
            };
            ch.push(c);
        }
        Ok(ch)
    }

    /// Output shape of every node for an `h × w` input. Both extents must be
    /// multiples of 32 and the heads must land on strides 8, 16, 32.
    pub fn infer_shapes(&self, h: usize, w: usize) -> Result<Vec<NodeShape>> {
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(config_err!("input {h}x{w} must be a positive multiple of 32 on both axes"));
        }
        let channels = self.channels()?;
        let mut shapes: Vec<NodeShape> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<NodeShape> = node.inputs.iter().map(|&j| shapes[j]).collect();
            let c = channels[i];
            let extent = |x: usize, k: usize, s: usize, p: usize, d: usize| {
                conv_out_extent(x, k, s, p, d).ok_or_else(|| {
                    config_err!("node {:?}: kernel {k} (dilation {d}) does not fit extent {x} with padding {p}", node.name)
                })
            };
            let same = |what: &str| -> Result<(usize, usize)> {
                let (h0, w0) = (ins[0].h, ins[0].w);
                if ins.iter().any(|s| (s.h, s.w) != (h0, w0)) {
                    let got: Vec<(usize, usize)> = ins.iter().map(|s| (s.h, s.w)).collect();
                    return Err(shape_err!("node {:?}: {what} inputs disagree on spatial size {got:?}", node.name));
                }
                Ok((h0, w0))
            };
            let shape = match &node.spec {
                LayerSpec::Input { .. } => NodeShape { c, h, w },
                LayerSpec::Focus { .. } => {
                    let s = ins[0];
                    if s.h % 2 != 0 || s.w % 2 != 0 {
                        return Err(config_err!("node {:?}: focus needs even extents, got {}x{}", node.name, s.h, s.w));
                    }
                    NodeShape { c, h: s.h / 2, w: s.w / 2 }
                }
                LayerSpec::Cbl {
                    kernel,
                    stride,
                    padding,
                    dilation,
                    ..
                } => NodeShape {
                    c,
                    h: extent(ins[0].h, *kernel, *stride, *padding, *dilation)?,
                    w: extent(ins[0].w, *kernel, *stride, *padding, *dilation)?,
                },
                LayerSpec::Spp { bins } => {
                    for &n in bins {
                        let (kh, kw) = (spp_kernel(ins[0].h, n)?, spp_kernel(ins[0].w, n)?);
                        extent(ins[0].h, kh, 1, kh / 2, 1)?;
                        extent(ins[0].w, kw, 1, kw / 2, 1)?;
                    }
                    NodeShape { c, ..ins[0] }
                }
                LayerSpec::Aspp => {
                    for (k, r) in [(3, 3), (3, 6)] {
                        extent(ins[0].h, k, 1, r, r)?;
                        extent(ins[0].w, k, 1, r, r)?;
                    }
                    NodeShape { c, ..ins[0] }
                }
                LayerSpec::RfpFuse => {
                    let (h, w) = same("rfp_fuse")?;
                    NodeShape { c, h, w }
                }
                LayerSpec::CspDense { .. } | LayerSpec::DetectHead { .. } => NodeShape { c, ..ins[0] },
                LayerSpec::Upsample { factor } => NodeShape {
                    c,
                    h: ins[0].h * factor,
                    w: ins[0].w * factor,
                },
                LayerSpec::Concat => {
                    let (h, w) = same("concat")?;
                    NodeShape { c, h, w }
                }
            };
            shapes.push(shape);
        }
        for (k, &head) in self.heads.iter().enumerate() {
            let s = shapes[head];
            let stride = 8usize << k;
            if s.h * stride != h || s.w * stride != w {
                return Err(config_err!(
                    "head {:?} is {}x{} at input {h}x{w}, expected stride {stride}",
                    self.nodes[head].name,
                    s.h,
                    s.w
                ));
            }
        }
        Ok(shapes)
    }

    /// Pixel strides of the heads, finest first.
    pub fn head_strides(&self) -> Vec<usize> {
        (0..self.heads.len()).map(|k| 8usize << k).collect()
    }
}

/// Expands feedback edges into `steps` sequential copies with shared
/// parameters. Step `t` fuses `R(f^{t-1})` into its backbone stages; step 1
/// has no feedback edge. Stem nodes are computed once and shared by every
/// step. Only the heads of the last step
/// are kept, together with whatever they depend on.
pub fn rfp_unroll(graph: &ModelGraph, steps: usize) -> Result<ModelGraph> {
    if steps == 0 {
        return Err(config_err!("rfp unroll count T must be at least 1"));
    }
    if graph.steps != 0 {
        return Err(config_err!("graph is already unrolled (T = {})", graph.steps));
    }
    let n = graph.nodes.len();
    // stem nodes are computed once; every B, F, R and head node gets a copy per step
    let mut recurrent = vec![false; n];
    for (i, node) in graph.nodes.iter().enumerate() {
        recurrent[i] = node.role != Role::Stem || node.feedback.is_some() || node.inputs.iter().any(|&j| recurrent[j]);
    }
    let suffix = |name: &str, t: usize| {
        if steps == 1 {
            name.to_string()
        } else {
            format!("{name}@{t}")
        }
    };
    let mut nodes: Vec<Node> = Vec::new();
    let mut copy: Vec<Vec<Option<usize>>> = vec![vec![None; n]; steps + 1];
    for t in 1..=steps {
        for (i, node) in graph.nodes.iter().enumerate() {
            if matches!(node.spec, LayerSpec::DetectHead { .. }) && t != steps {
                continue;
            }
            if !recurrent[i] && t > 1 {
                copy[t][i] = copy[1][i];
                continue;
            }
            let mut inputs: Vec<usize> = node
                .inputs
                .iter()
                .map(|&j| copy[t][j].expect("topological order"))
                .collect();
            if let (Some(src), true) = (node.feedback, t > 1) {
                inputs.push(copy[t - 1][src].expect("feedback source exists at the previous step"));
            }
            nodes.push(Node {
                name: if recurrent[i] { suffix(&node.name, t) } else { node.name.clone() },
                spec: node.spec.clone(),
                inputs,
                feedback: None,
                role: node.role,
                param_key: node.param_key.clone(),
                step: if recurrent[i] { t } else { 0 },
            });
            copy[t][i] = Some(nodes.len() - 1);
        }
    }
    let heads: Vec<usize> = graph
        .heads
        .iter()
        .map(|&h| copy[steps][h].expect("heads exist at the last step"))
        .collect();

    // keep only what the final heads need
    let mut live = vec![false; nodes.len()];
    let mut stack = heads.clone();
    while let Some(i) = stack.pop() {
        if !live[i] {
            live[i] = true;
            stack.extend(nodes[i].inputs.iter().copied());
        }
    }
    live[copy[1][graph.input].expect("input is shared")] = true;
    let mut remap = vec![usize::MAX; nodes.len()];
    let mut kept = Vec::new();
    for (i, node) in nodes.into_iter().enumerate() {
        if live[i] {
            remap[i] = kept.len();
            kept.push(node);
        }
    }
    for node in &mut kept {
        node.inputs.iter_mut().for_each(|j| *j = remap[*j]);
    }
    let heads = heads.iter().map(|&h| remap[h]).collect();
    ModelGraph::from_nodes(kept, heads, Some(graph.params.clone()), steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;

    fn tiny() -> ModelGraph {
        let act = Activation::leaky();
        let mut b = ModelGraph::builder();
        b.add("input", LayerSpec::Input { channels: 3 }, &[], Role::Stem)
            .add("s1", LayerSpec::down(8, act), &["input"], Role::Stem)
            .add("s2", LayerSpec::down(8, act), &["s1"], Role::Stem)
            .add("s3", LayerSpec::down(8, act), &["s2"], Role::Backbone(1))
            .add("fuse", LayerSpec::RfpFuse, &["s3"], Role::Backbone(1))
            .add("f1", LayerSpec::cbl1(8, act), &["fuse"], Role::Pyramid(1))
            .add("r1", LayerSpec::Aspp, &["f1"], Role::Connect(1))
            .add("d2", LayerSpec::down(8, act), &["f1"], Role::Backbone(2))
            .add("d3", LayerSpec::down(8, act), &["d2"], Role::Backbone(3))
            .add("h1", LayerSpec::DetectHead { anchors: 3, classes: 1 }, &["f1"], Role::Head(1))
            .add("h2", LayerSpec::DetectHead { anchors: 3, classes: 1 }, &["d2"], Role::Head(2))
            .add("h3", LayerSpec::DetectHead { anchors: 3, classes: 1 }, &["d3"], Role::Head(3));
        b.feedback("fuse", "r1").unwrap();
        b.finish(&["h1", "h2", "h3"]).unwrap()
    }

    #[test]
    fn unroll_shares_prefix_and_params() {
        let g = tiny();
        let u1 = rfp_unroll(&g, 1).unwrap();
        let u2 = rfp_unroll(&g, 2).unwrap();
        assert_eq!(u1.param_count(), u2.param_count());
        assert_eq!(u1.param_count(), g.param_count());
        assert!(u1.node("r1").is_none(), "R is unused at T=1");
        assert!(u2.node("s1@2").is_none() && u2.node("s1").is_some());
        let fuse2 = u2.node("fuse@2").unwrap();
        assert_eq!(u2.nodes()[fuse2].inputs, vec![u2.node("s3@2").unwrap(), u2.node("r1@1").unwrap()]);
        assert!(u2.node("h1@1").is_none());
        let shapes = u2.infer_shapes(64, 64).unwrap();
        assert_eq!(shapes[u2.heads()[2]], NodeShape { c: 18, h: 2, w: 2 });
    }

    #[test]
    fn bad_inputs_rejected() {
        let g = tiny();
        assert!(rfp_unroll(&g, 0).is_err());
        assert!(g.infer_shapes(63, 64).is_err());
        let mut b = ModelGraph::builder();
        b.add("input", LayerSpec::Input { channels: 3 }, &[], Role::Stem)
            .add("a", LayerSpec::cbl1(4, Activation::Relu), &["b"], Role::Stem)
            .add("b", LayerSpec::cbl1(4, Activation::Relu), &["a"], Role::Stem)
            .add("h", LayerSpec::DetectHead { anchors: 3, classes: 1 }, &["b"], Role::Head(1));
        assert!(b.finish(&["h"]).unwrap_err().to_string().contains("cycle"));
    }
}
