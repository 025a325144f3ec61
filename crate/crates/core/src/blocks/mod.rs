//! Architectural blocks (Focus, CBL, CSPDense, SPP, ASPP, recursive
//! feature pyramid), graph construction, shape inference and CIO accounting.

mod cio;
mod config;
mod forward;
mod graph;
mod params;

pub use cio::{analyze_cio, cio, spp_params, Cio, CioKind, CioReport, CioRow, SppParams};
pub use config::{AnchorSection, BackboneSection, GraphConfig, ModelSection, NeckSection};
pub use forward::{
    aspp_forward, cbl_forward, csp_dense_forward, focus_forward, focus_slice, forward, spp_forward, spp_kernel,
    ForwardOutput, Session,
};
pub use graph::{rfp_unroll, GraphBuilder, ModelGraph, Node, NodeShape, Role};
pub use params::{init_params, Init, ParamInfo, ParamKind, ParamStore, PRIOR_OBJECTNESS};

use crate::error::{config_err, Result};
use crate::tensor::Activation;

/// One node's operator and its hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Input {
        channels: usize,
    },
    /// Stride-2 space-to-channel slicing followed by a CBL.
    Focus {
        out: usize,
        kernel: usize,
        act: Activation,
    },
    /// Convolution, batch normalisation and an activation.
    Cbl {
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        act: Activation,
    },
    CspDense {
        out: usize,
        /// Dense layer count `m`.
        layers: usize,
        /// Growth rate `d`.
        growth: usize,
        act: Activation,
        transition_act: Activation,
    },
    Spp {
        bins: Vec<usize>,
    },
    /// The connecting module `R`.
    Aspp,
    /// Adds a 1×1 projection of the fed-back pyramid feature to its first input.
    RfpFuse,
    Upsample {
        factor: usize,
    },
    Concat,
    DetectHead {
        anchors: usize,
        classes: usize,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "input",
            LayerSpec::Focus { .. } => "focus",
            LayerSpec::Cbl { .. } => "cbl",
            LayerSpec::CspDense { .. } => "csp_dense",
            LayerSpec::Spp { .. } => "spp",
            LayerSpec::Aspp => "aspp",
            LayerSpec::RfpFuse => "rfp_fuse",
            LayerSpec::Upsample { .. } => "upsample",
            LayerSpec::Concat => "concat",
            LayerSpec::DetectHead { .. } => "detect_head",
        }
    }

    /// 3×3 stride-1 CBL with same padding.
    pub fn cbl3(out: usize, act: Activation) -> Self {
        LayerSpec::Cbl {
            out,
            kernel: 3,
            stride: 1,
            padding: 1,
            dilation: 1,
            act,
        }
    }

    pub fn cbl1(out: usize, act: Activation) -> Self {
        LayerSpec::Cbl {
            out,
            kernel: 1,
            stride: 1,
            padding: 0,
            dilation: 1,
            act,
        }
    }

    /// 3×3 stride-2 downsampling CBL.
    pub fn down(out: usize, act: Activation) -> Self {
        LayerSpec::Cbl {
            out,
            kernel: 3,
            stride: 2,
            padding: 1,
            dilation: 1,
            act,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(config_err!("{}: {what} must be positive", self.kind()))
            } else {
                Ok(())
            }
        };
        match self {
            LayerSpec::Input { channels } => positive("channels", *channels),
            LayerSpec::Focus { out, kernel, .. } => {
                positive("out", *out)?;
                positive("kernel", *kernel)?;
                if kernel % 2 == 0 {
                    return Err(config_err!("focus: kernel {kernel} must be odd"));
                }
                Ok(())
            }
            LayerSpec::Cbl {
                out,
                kernel,
                stride,
                dilation,
                ..
            } => {
                positive("out", *out)?;
                positive("kernel", *kernel)?;
                positive("stride", *stride)?;
                positive("dilation", *dilation)
            }
            LayerSpec::CspDense { out, layers, growth, .. } => {
                positive("out", *out)?;
                positive("layers (m)", *layers)?;
                positive("growth (d)", *growth)?;
                if out % 2 != 0 {
                    return Err(config_err!("csp_dense: out {out} must be even"));
                }
                Ok(())
            }
            LayerSpec::Spp { bins } => {
                if bins.is_empty() {
                    return Err(config_err!("spp: bins must be non-empty"));
                }
                bins.iter().try_for_each(|&n| positive("bin", n))
            }
            LayerSpec::Upsample { factor } => positive("factor", *factor),
            LayerSpec::DetectHead { anchors, classes } => {
                positive("anchors", *anchors)?;
                positive("classes", *classes)
            }
            LayerSpec::Aspp | LayerSpec::RfpFuse | LayerSpec::Concat => Ok(()),
        }
    }
}
