use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::boxgeom::{HeadLayout, LossWeights};
use crate::error::{config_err, Error, Result};
use crate::tensor::Activation;

use super::graph::{rfp_unroll, ModelGraph, Role};
use super::LayerSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    #[serde(default = "defaults::input_channels")]
    pub input_channels: usize,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    /// Network input side in pixels (square).
    #[serde(default = "defaults::input_size")]
    pub input_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    /// Channels after the focus CBL.
    #[serde(default = "defaults::stem")]
    pub stem: usize,
    #[serde(default = "defaults::focus_kernel")]
    pub focus_kernel: usize,
    /// Widths of the four downsampling stages.
    pub stages: Vec<usize>,
    /// Dense layers `m` per CSPDense block.
    #[serde(default = "defaults::dense_layers")]
    pub dense_layers: usize,
    /// Growth rate `d` per stage; half the stage width when absent.
    #[serde(default)]
    pub growth: Option<Vec<usize>>,
    #[serde(default = "Activation::leaky")]
    pub activation: Activation,
    #[serde(default = "defaults::dense_activation")]
    pub dense_activation: Activation,
    #[serde(default = "defaults::spp_bins")]
    pub spp_bins: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeckSection {
    /// Pyramid widths for strides 8/16/32; half the matching stage widths when absent.
    #[serde(default)]
    pub channels: Option<Vec<usize>>,
    /// Unroll count `T`.
    #[serde(default = "defaults::rfp_steps")]
    pub rfp_steps: usize,
    /// Without feedback the neck is a plain top-down pyramid.
    #[serde(default = "defaults::yes")]
    pub feedback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSection {
    pub sizes: AnchorSet,
}

impl Default for AnchorSection {
    fn default() -> Self {
        AnchorSection {
            sizes: AnchorSet::paper(),
        }
    }
}

mod defaults {
    use crate::tensor::Activation;

    pub fn input_channels() -> usize {
        3
    }
    pub fn classes() -> usize {
        1
    }
    pub fn input_size() -> usize {
        416
    }
    pub fn stem() -> usize {
        32
    }
    pub fn focus_kernel() -> usize {
        3
    }
    pub fn dense_layers() -> usize {
        2
    }
    pub fn dense_activation() -> Activation {
        Activation::Mish
    }
    pub fn spp_bins() -> Vec<usize> {
        vec![1, 2, 4]
    }
    pub fn rfp_steps() -> usize {
        2
    }
    pub fn yes() -> bool {
        true
    }
}

/// The graph config file: a TOML document with `[model]`, `[backbone]`,
/// `[neck]`, and optional `[anchors]` and `[loss]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub model: ModelSection,
    pub backbone: BackboneSection,
    pub neck: NeckSection,
    #[serde(default)]
    pub anchors: AnchorSection,
    #[serde(default)]
    pub loss: LossWeights,
}

impl GraphConfig {
    /// Full-width TC-YOLO.
    pub fn canonical() -> Self {
        GraphConfig {
            model: ModelSection {
                name: "tc-yolo".into(),
                input_channels: 3,
                classes: 1,
                input_size: 416,
            },
            backbone: BackboneSection {
                stem: 32,
                focus_kernel: 3,
                stages: vec![64, 128, 256, 512],
                dense_layers: 2,
                growth: None,
                activation: Activation::leaky(),
                dense_activation: Activation::Mish,
                spp_bins: vec![1, 2, 4],
            },
            neck: NeckSection {
                channels: None,
                rfp_steps: 2,
                feedback: true,
            },
            anchors: AnchorSection::default(),
            loss: LossWeights::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: GraphConfig = toml::from_str(text).map_err(|e| config_err!("graph config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| config_err!("{}: {e}", path.display()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err!("cannot serialise graph config: {e}"))
    }

    pub fn growth(&self) -> Vec<usize> {
        self.backbone
            .growth
            .clone()
            .unwrap_or_else(|| self.backbone.stages.iter().map(|w| w / 2).collect())
    }

    pub fn neck_channels(&self) -> Vec<usize> {
        self.neck
            .channels
            .clone()
            .unwrap_or_else(|| self.backbone.stages[1..].iter().map(|w| w / 2).collect())
    }

    pub fn head_layout(&self) -> HeadLayout {
        HeadLayout {
            anchors: self.anchors.sizes.per_scale(),
            classes: self.model.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.stages.len() != 4 {
            return Err(config_err!("backbone.stages must list 4 widths, got {}", b.stages.len()));
        }
        if self.growth().len() != 4 {
            return Err(config_err!("backbone.growth must list 4 values"));
        }
        let neck = self.neck_channels();
        if neck.len() != 3 {
            return Err(config_err!("neck.channels must list 3 widths, got {}", neck.len()));
        }
        if self.neck.feedback {
            if let Some(c) = neck.iter().find(|&&c| c % 4 != 0) {
                return Err(config_err!("neck width {c} must be divisible by 4 for the ASPP connector"));
            }
        }
        if self.neck.rfp_steps == 0 {
            return Err(config_err!("neck.rfp_steps (T) must be at least 1"));
        }
        if self.anchors.sizes.num_scales() != 3 {
            return Err(config_err!("anchors must hold 9 sizes (3 per scale)"));
        }
        if self.model.input_size == 0 || self.model.input_size % 32 != 0 {
            return Err(config_err!("model.input_size {} must be a positive multiple of 32", self.model.input_size));
        }
        Ok(())
    }

    /// The graph before unrolling: feedback edges from each ASPP connector
    /// into the matching backbone stage (when enabled).
    pub fn build_base(&self) -> Result<ModelGraph> {
        self.validate()?;
        let b = &self.backbone;
        let act = b.activation;
        let growth = self.growth();
        let neck = self.neck_channels();
        let feedback = self.neck.feedback;
        let mut g = ModelGraph::builder();
        g.add(
            "input",
            LayerSpec::Input {
                channels: self.model.input_channels,
            },
            &[],
            Role::Stem,
        );
        g.add(
            "focus",
            LayerSpec::Focus {
                out: b.stem,
                kernel: b.focus_kernel,
                act,
            },
            &["input"],
            Role::Stem,
        );
        let mut prev = "focus".to_string();
        for (s, &width) in b.stages.iter().enumerate() {
            let stage = s + 1;
            let role = if s == 0 { Role::Stem } else { Role::Backbone(s) };
            let down = format!("stage{stage}.down");
            g.add(&down, LayerSpec::down(width, act), &[&prev], role);
            let mut into = down.clone();
            if s > 0 && feedback {
                let fuse = format!("stage{stage}.fuse");
                g.add(&fuse, LayerSpec::RfpFuse, &[&down], role);
                into = fuse;
            }
            let csp = format!("stage{stage}.csp");
            g.add(
                &csp,
                LayerSpec::CspDense {
                    out: width,
                    layers: b.dense_layers,
                    growth: growth[s],
                    act: b.dense_activation,
                    transition_act: act,
                },
                &[&into],
                role,
            );
            prev = csp;
        }
        g.add(
            "stage4.spp",
            LayerSpec::Spp {
                bins: b.spp_bins.clone(),
            },
            &["stage4.csp"],
            Role::Backbone(3),
        );
        g.add("stage4.reduce", LayerSpec::cbl1(b.stages[3], act), &["stage4.spp"], Role::Backbone(3));

        g.add("neck.p3", LayerSpec::cbl1(neck[2], act), &["stage4.reduce"], Role::Pyramid(3));
        g.add("neck.up3", LayerSpec::Upsample { factor: 2 }, &["neck.p3"], Role::Pyramid(2));
        g.add("neck.cat2", LayerSpec::Concat, &["neck.up3", "stage3.csp"], Role::Pyramid(2));
        g.add("neck.p2", LayerSpec::cbl3(neck[1], act), &["neck.cat2"], Role::Pyramid(2));
        g.add("neck.up2", LayerSpec::Upsample { factor: 2 }, &["neck.p2"], Role::Pyramid(1));
        g.add("neck.cat1", LayerSpec::Concat, &["neck.up2", "stage2.csp"], Role::Pyramid(1));
        g.add("neck.p1", LayerSpec::cbl3(neck[0], act), &["neck.cat1"], Role::Pyramid(1));

        let head = LayerSpec::DetectHead {
            anchors: self.anchors.sizes.per_scale(),
            classes: self.model.classes,
        };
        for level in 1..=3 {
            let f = format!("neck.p{level}");
            if feedback {
                let r = format!("rfp.aspp{level}");
                g.add(&r, LayerSpec::Aspp, &[&f], Role::Connect(level));
                g.feedback(&format!("stage{}.fuse", level + 1), &r)?;
            }
            g.add(&format!("head{level}"), head.clone(), &[&f], Role::Head(level));
        }
        g.finish(&["head1", "head2", "head3"])
    }

    /// The runnable graph: unrolled `T` times when feedback is enabled.
    pub fn build(&self) -> Result<ModelGraph> {
        let base = self.build_base()?;
        if self.neck.feedback {
            rfp_unroll(&base, self.neck.rfp_steps)
        } else {
            Ok(base)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_heads_follow_input_size() {
        let g = GraphConfig::canonical().build().unwrap();
        for (size, expect) in [(608, [76, 38, 19]), (416, [52, 26, 13])] {
            let shapes = g.infer_shapes(size, size).unwrap();
            let got: Vec<usize> = g.heads().iter().map(|&h| shapes[h].h).collect();
            assert_eq!(got, expect);
        }
        assert!(g.infer_shapes(415, 415).is_err());
    }

    #[test]
    fn focus_stem_shapes_at_416() {
        let g = GraphConfig::canonical().build().unwrap();
        let shapes = g.infer_shapes(416, 416).unwrap();
        let f = shapes[g.node("focus").unwrap()];
        assert_eq!((f.c, f.h, f.w), (32, 208, 208));
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = GraphConfig::canonical();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(GraphConfig::from_toml_str(&text).unwrap(), cfg);
        let bad = text.replace("[neck]", "[neck]\nbogus = 1");
        assert!(GraphConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn rejects_bad_neck_width() {
        let mut cfg = GraphConfig::canonical();
        cfg.neck.channels = Some(vec![8, 18, 32]);
        assert!(cfg.build().unwrap_err().to_string().contains("divisible by 4"));
    }

    #[test]
    fn t_equals_one_keeps_plain_node_names() {
        let mut cfg = GraphConfig::canonical();
        cfg.neck.rfp_steps = 1;
        let g = cfg.build().unwrap();
        assert!(g.node("stage2.fuse").is_some());
        assert!(g.node("rfp.aspp1").is_none());
    }
}
