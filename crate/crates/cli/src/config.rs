use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use tcyolo::boxgeom::{LossWeights, NMS_DIOU_THRESHOLD};
use tcyolo::data::AugmentOp;
use tcyolo::eval::DEFAULT_IOU_THRESHOLD;

/// Run settings shared by every command. Values come from defaults, then
/// an optional `--config` TOML file, then command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Network input side; the graph config's `model.input_size` when unset.
    pub input_size: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_momentum: f64,
    pub warmup_bias_lr: f64,
    pub warmup_epochs: f64,
    /// Learning-rate multiplier applied at each milestone.
    pub gamma: f64,
    /// Milestones as fractions of the epoch count.
    pub milestones: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Flip/rotation ops drawn per training sample (identity included).
    pub augment: Vec<String>,
    /// Replaces the graph config's loss weights when set.
    pub loss: Option<LossWeights>,
    pub nms_iou: f64,
    /// Score floor for evaluation.
    pub eval_conf: f64,
    /// Score floor for `detect` output.
    pub detect_conf: f64,
    pub max_det: usize,
    pub iou_threshold: f64,
    pub data: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input_size: None,
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 5e-4,
            warmup_momentum: 0.8,
            warmup_bias_lr: 0.1,
            warmup_epochs: 3.0,
            gamma: 0.1,
            milestones: vec![0.6, 0.9],
            epochs: 30,
            batch_size: 8,
            seed: 0,
            augment: AugmentOp::ALL.iter().map(|op| op.as_str().to_owned()).collect(),
            loss: None,
            nms_iou: NMS_DIOU_THRESHOLD,
            eval_conf: 0.001,
            detect_conf: 0.25,
            max_det: 100,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            data: None,
            graph: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading run config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| tcyolo::Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn augment_ops(&self) -> Result<Vec<AugmentOp>> {
        Ok(self.augment.iter().map(|s| s.parse()).collect::<Result<Vec<_>, _>>()?)
    }

    pub fn validate(&self) -> Result<()> {
        let config = |msg: String| tcyolo::Error::Config(msg);
        if let Some(s) = self.input_size {
            ensure!(s > 0 && s % 32 == 0, config(format!("input size {s} must be a positive multiple of 32")));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("warmup_momentum", self.warmup_momentum),
            ("gamma", self.gamma),
            ("nms_iou", self.nms_iou),
        ] {
            ensure!(v > 0.0 && v.is_finite(), config(format!("{name} must be positive, got {v}")));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("warmup_bias_lr", self.warmup_bias_lr),
            ("warmup_epochs", self.warmup_epochs),
        ] {
            ensure!(v >= 0.0 && v.is_finite(), config(format!("{name} must be non-negative, got {v}")));
        }
        ensure!(self.batch_size > 0, config("batch_size must be at least 1".into()));
        ensure!(
            self.milestones.iter().all(|m| (0.0..=1.0).contains(m)),
            config(format!("milestones {:?} must be fractions in [0, 1]", self.milestones))
        );
        self.augment_ops()?;
        Ok(())
    }

    /// Learning-rate factor for `epoch` (0-based) of `epochs`.
    pub fn lr_factor(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * epochs as f64).floor() as usize)
            .count();
        self.gamma.powi(passed as i32)
    }
}
