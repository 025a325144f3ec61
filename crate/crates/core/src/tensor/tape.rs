//! Wengert tape: every operator appends one node holding its output value and
//! whatever the backward rule needs. Node order is a topological order of the
//! forward computation, so [`Tape::backward`] is a single reverse sweep.

use crate::error::{shape_err, Result};

use super::activation::Activation;
use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use super::ops::{self, BatchNormConfig, BnMode, BnSaved, PoolGeom, RunningStats};
use super::{Conv2dConfig, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    /// Leaf value or an operator output that needs no backward rule.
    Const,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        running: RunningStats,
        saved: BnSaved,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    ResizeNearest {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    Stride2Slice {
        input: Var,
        row: usize,
        col: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Tensor,
    },
    /// Scalar-valued fused operator with precomputed local gradients.
    ScalarFn {
        inputs: Vec<Var>,
        local_grads: Vec<Tensor>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Conv2d { .. } => "conv2d",
            Op::Act { .. } => "activation",
            Op::BatchNorm { .. } => "batchnorm",
            Op::MaxPool { .. } => "maxpool2d",
            Op::GlobalAvgPool { .. } => "global_avgpool",
            Op::ResizeNearest { .. } => "resize_nearest",
            Op::Concat { .. } => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Stride2Slice { .. } => "stride2_slice",
            Op::Add { .. } => "add",
            Op::Sum { .. } => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::ScalarFn { .. } => "scalar_fn",
        }
    }
}

struct TapeNode {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of tape nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

pub struct Tape {
    nodes: Vec<TapeNode>,
    tracking: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward information.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            tracking: true,
        }
    }

    /// A tape that only stores values; [`Tape::backward`] yields no gradients.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            tracking: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Records a leaf; gradients flow to it when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.tracking;
        self.nodes.push(TapeNode {
            value,
            op: Op::Const,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = self.tracking && inputs.iter().any(|&v| self.needs(v));
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(TapeNode {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, cfg: Conv2dConfig) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let b = bias.map(|b| self.value(b));
        let geom = ConvGeom::new(x, w, b, cfg)?;
        let out = conv2d_forward(&geom, x, w, b);
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| kind.apply(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(out, &[input], Op::Act { input, kind })
    }

    /// Batch normalization. In [`BnMode::Train`] the second element holds the
    /// running statistics after this batch's moving-average update.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        mode: BnMode,
        cfg: BatchNormConfig,
    ) -> Result<(Var, Option<RunningStats>)> {
        let (out, saved, stats) = ops::batchnorm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running,
            mode,
            cfg,
        )?;
        let var = self.push(
            out,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                running: running.clone(),
                saved,
            },
        );
        Ok((var, stats))
    }

    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        self.maxpool2d_rect(input, (kernel, kernel), (stride, stride), (padding, padding))
    }

    pub fn maxpool2d_rect(
        &mut self,
        input: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let geom = PoolGeom {
            kernel,
            stride,
            padding,
        };
        let (out, argmax) = ops::maxpool_forward(self.value(input), geom)?;
        Ok(self.push(out, &[input], Op::MaxPool { input, argmax }))
    }

    pub fn global_avgpool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avgpool_forward(self.value(input))?;
        Ok(self.push(out, &[input], Op::GlobalAvgPool { input }))
    }

    pub fn resize_nearest(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        let out = ops::resize_nearest_forward(self.value(input), height, width)?;
        Ok(self.push(out, &[input], Op::ResizeNearest { input }))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat_channels_forward(&values)?;
        Ok(self.push(
            out,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_channels_forward(self.value(input), start, len)?;
        Ok(self.push(out, &[input], Op::SliceChannels { input, start }))
    }

    pub fn stride2_slice(&mut self, input: Var, row: usize, col: usize) -> Result<Var> {
        let out = ops::stride2_slice_forward(self.value(input), row, col)?;
        Ok(self.push(out, &[input], Op::Stride2Slice { input, row, col }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err!("add: shapes {:?} and {:?} differ", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, &[a, b], Op::Add { a, b }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, &[input], Op::Sum { input })
    }

    /// `Σ weights[i] · input[i]`, a fixed linear functional.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(shape_err!(
                "weighted_sum: weights {:?} do not match input {:?}",
                weights.shape(),
                x.shape()
            ));
        }
        let v = x.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(v), &[input], Op::WeightedSum { input, weights }))
    }

    /// Records a scalar computed outside the tape together with its gradient
    /// with respect to each input.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: f64, local_grads: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != local_grads.len() {
            return Err(shape_err!("scalar_fn: {} inputs but {} gradients", inputs.len(), local_grads.len()));
        }
        for (&v, g) in inputs.iter().zip(&local_grads) {
            if self.value(v).shape() != g.shape() {
                return Err(shape_err!(
                    "scalar_fn: gradient shape {:?} does not match input {:?}",
                    g.shape(),
                    self.value(v).shape()
                ));
            }
        }
        Ok(self.push(
            Tensor::scalar(value),
            inputs,
            Op::ScalarFn {
                inputs: inputs.to_vec(),
                local_grads,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar, got shape {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads { grads, visited });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Const) {
                visited += 1;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &TapeNode, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Const => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) = conv2d_backward(
                    geom,
                    self.value(*input),
                    self.value(*weight),
                    g,
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Act { input, kind } => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                    .collect();
                self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), data).expect("same shape"));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                running,
                saved,
            } => {
                let (dx, dgamma, dbeta) =
                    ops::batchnorm_backward(self.value(*input), self.value(*gamma), running, saved, g);
                self.accumulate(grads, *input, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[o];
                }
                self.accumulate(grads, *input, dx);
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let hw = x.shape()[2] * x.shape()[3];
                let mut dx = Tensor::zeros(x.shape());
                for (plane, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                    chunk.fill(g.data()[plane] / hw as f64);
                }
                self.accumulate(grads, *input, dx);
            }
            Op::ResizeNearest { input } => {
                let dx = ops::resize_nearest_backward(self.value(*input).shape(), g);
                self.accumulate(grads, *input, dx);
            }
            Op::Concat { inputs } => {
                let mut start = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[1];
                    if self.needs(v) {
                        let dx = ops::slice_channels_forward(g, start, c).expect("concat layout");
                        self.accumulate(grads, v, dx);
                    }
                    start += c;
                }
            }
            Op::SliceChannels { input, start } => {
                let dx = ops::slice_channels_backward(self.value(*input).shape(), *start, g);
                self.accumulate(grads, *input, dx);
            }
            Op::Stride2Slice { input, row, col } => {
                let dx = ops::stride2_slice_backward(self.value(*input).shape(), *row, *col, g);
                self.accumulate(grads, *input, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sum { input } => {
                let dx = Tensor::full(self.value(*input).shape(), g.data()[0]);
                self.accumulate(grads, *input, dx);
            }
            Op::WeightedSum { input, weights } => {
                let s = g.data()[0];
                let data = weights.data().iter().map(|w| w * s).collect();
                self.accumulate(grads, *input, Tensor::new(weights.shape().to_vec(), data).expect("same shape"));
            }
            Op::ScalarFn { inputs, local_grads } => {
                let s = g.data()[0];
                for (&v, lg) in inputs.iter().zip(local_grads) {
                    let data = lg.data().iter().map(|d| d * s).collect();
                    self.accumulate(grads, v, Tensor::new(lg.shape().to_vec(), data).expect("same shape"));
                }
            }
        }
    }
}
