use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tcyolo::data::SynthSpec;

use crate::commands::{self, EvalArgs, Part};
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "tcyolo", version, about = "Train, run and inspect TC-YOLO flower detectors")]
pub struct Cli {
    /// Run config (TOML); command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit anchor sizes to a dataset with IoU k-means.
    Anchors {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale boxes as if letterboxed to this input size.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 9)]
        k: usize,
    },
    /// Generate a synthetic flower dataset.
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overlap ratio of injected pairs; 0 disables them.
        #[arg(long)]
        overlap: Option<f64>,
        #[arg(long)]
        size: Option<u32>,
    },
    /// Train a model and keep the checkpoint with the best validation AP.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Write detections for a set of images.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Glob pattern, e.g. `data/images/*.png`.
        #[arg(long)]
        images: String,
        #[arg(long, default_value = "runs/detect")]
        out: PathBuf,
        /// Also write images with boxes drawn.
        #[arg(long)]
        draw: bool,
        #[arg(long)]
        conf: Option<f64>,
    },
    /// Score a checkpoint or saved detections against labels.
    Eval {
        #[arg(long, conflicts_with = "dets", required_unless_present = "dets")]
        ckpt: Option<PathBuf>,
        /// Directory of `detect` output to score instead of running a model.
        #[arg(long)]
        dets: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long, value_enum, default_value_t = Part::Test)]
        split: Part,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        conf: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-node shapes, CIO figures and parameter count.
    Analyze {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        size: usize,
        /// Comma-separated rows instead of the aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Save channel-mean feature maps of named layers as grayscale images.
    Activations {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<String>,
        #[arg(long, default_value = "runs/activations")]
        out: PathBuf,
    },
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Executes a parsed command and returns what it prints.
pub fn run(cli: Cli) -> Result<String> {
    let mut cfg = RunConfig::from_file(cli.config.as_deref())?;
    let out = match cli.command {
        Command::Anchors { data, seed, size, k } => commands::anchors(&data, seed, size, k)?,
        Command::Synth {
            n,
            out,
            seed,
            overlap,
            size,
        } => {
            let mut spec = SynthSpec {
                n,
                seed,
                ..SynthSpec::default()
            };
            if let Some(r) = overlap {
                spec.overlap = (r > 0.0).then_some(r);
            }
            set(&mut spec.size, size);
            commands::synth(&spec, &out)?
        }
        Command::Train {
            data,
            graph,
            epochs,
            size,
            out,
            seed,
            lr,
            batch,
        } => {
            set(&mut cfg.data, data.map(Some));
            set(&mut cfg.graph, graph.map(Some));
            set(&mut cfg.epochs, epochs);
            set(&mut cfg.input_size, size.map(Some));
            set(&mut cfg.out, out.map(Some));
            set(&mut cfg.seed, seed);
            set(&mut cfg.lr, lr);
            set(&mut cfg.batch_size, batch);
            cfg.validate()?;
            commands::train(&cfg)?
        }
        Command::Detect {
            ckpt,
            images,
            out,
            draw,
            conf,
        } => {
            cfg.validate()?;
            commands::detect(&cfg, &ckpt, &images, &out, draw, conf)?
        }
        Command::Eval {
            ckpt,
            dets,
            data,
            iou,
            split,
            seed,
            conf,
            out,
        } => {
            set(&mut cfg.iou_threshold, iou);
            set(&mut cfg.seed, seed);
            if !(0.0..=1.0).contains(&cfg.iou_threshold) {
                return Err(tcyolo::Error::Config(format!("IoU threshold {} outside [0, 1]", cfg.iou_threshold)).into());
            }
            cfg.validate()?;
            commands::eval(
                &cfg,
                EvalArgs {
                    ckpt: ckpt.as_deref(),
                    dets: dets.as_deref(),
                    data: &data,
                    part: split,
                    out: out.as_deref(),
                    conf,
                },
            )?
        }
        Command::Analyze { graph, size, csv } => commands::analyze(&graph, size, csv)?,
        Command::Activations {
            ckpt,
            image,
            layers,
            out,
        } => commands::activations(&ckpt, &image, &layers, &out)?,
    };
    Ok(out)
}

/// Parses `args` (without the program name) and runs them.
pub fn run_args<I, S>(args: I) -> Result<String>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("tcyolo")).chain(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(argv).map_err(|e| tcyolo::Error::Config(first_line(&e.to_string())))?;
    run(cli)
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("").trim_start_matches("error: ").to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "lr = 0.5\nepochs = 7\nbatch_size = 3\n").unwrap();
        let cli = Cli::try_parse_from([
            "tcyolo",
            "--config",
            cfg.to_str().unwrap(),
            "train",
            "--lr",
            "0.25",
        ])
        .unwrap();
        let mut c = RunConfig::from_file(cli.config.as_deref()).unwrap();
        if let Command::Train { lr, epochs, .. } = cli.command {
            set(&mut c.lr, lr);
            set(&mut c.epochs, epochs);
        }
        assert_eq!((c.lr, c.epochs, c.batch_size), (0.25, 7, 3));
    }
}
