//! Command-line front end: dataset generation, training, evaluation, and
//! report analysis, each driven by a [`RunConfig`].

pub mod commands;
pub mod config;
pub mod error;
pub mod reports;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{EvalConfig, EvalMode, Override, PathsConfig, RunConfig};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "trajrefine", version, about = "Scenario-adaptive trajectory refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output JSONL file (default: paths.train_data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint per epoch.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (default: paths.run_dir).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Keep backbone parameters fixed.
        #[arg(long)]
        freeze_backbone: bool,
        /// Continue from a checkpoint with its recorded configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset with ground truth (default: paths.test_data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory (default: paths.eval_dir).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Iterations of the fixed sweep.
        #[arg(long)]
        iterations: Option<usize>,
        /// Adaptive score threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Adaptive iteration budget.
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Compare evaluation runs and tabulate score distributions.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Evaluation directories to compare.
        #[arg(long = "eval", required = true)]
        evals: Vec<PathBuf>,
        /// Output directory (default: paths.analysis_dir).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fixed,
    Adaptive,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub sets: Vec<String>,
    /// Worker threads (training and evaluation).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Context frame: `anchor-centric` or `agent-centric`.
    #[arg(long)]
    pub encoding: Option<String>,
    /// Retrieval radius: `fixed:<m>`, `adaptive:linear`, or `adaptive:exp`.
    #[arg(long)]
    pub radius: Option<String>,
}

impl Common {
    /// `--set` values followed by the dedicated flags, which win.
    pub fn overrides(&self) -> Result<Vec<Override>> {
        let mut out = self
            .sets
            .iter()
            .map(|s| Override::parse(s))
            .collect::<Result<Vec<_>>>()?;
        let text = |key: &str, v: &str| Override {
            path: key.split('.').map(str::to_string).collect(),
            value: serde_json::Value::String(v.to_string()),
        };
        if let Some(e) = &self.encoding {
            out.push(text("refine.encoding", e));
        }
        if let Some(r) = &self.radius {
            out.push(text("refine.radius", r));
        }
        if let Some(j) = self.jobs {
            for key in ["train.jobs", "eval.jobs"] {
                out.push(Override {
                    path: key.split('.').map(str::to_string).collect(),
                    value: j.into(),
                });
            }
        }
        Ok(out)
    }

    pub fn load(&self) -> Result<(RunConfig, Vec<Override>)> {
        let overrides = self.overrides()?;
        Ok((RunConfig::load(self.config.as_deref(), &overrides)?, overrides))
    }
}

/// Parses `args` (program name first) and runs the command, writing
/// progress to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    match cli.command {
        Command::Generate { common, out: path } => {
            let (cfg, _) = common.load()?;
            let path = path.unwrap_or_else(|| cfg.paths.train_data.clone());
            commands::generate(&cfg, &path, out).map(drop)
        }
        Command::Train {
            common,
            data,
            out_dir,
            freeze_backbone,
            resume,
        } => {
            let (mut cfg, _) = common.load()?;
            cfg.train.freeze_backbone |= freeze_backbone;
            let data = data.unwrap_or_else(|| cfg.paths.train_data.clone());
            let dir = out_dir.unwrap_or_else(|| cfg.paths.run_dir.clone());
            commands::train(
                &cfg,
                &commands::TrainArgs {
                    data: &data,
                    out_dir: &dir,
                    resume: resume.as_deref(),
                    jobs: common.jobs,
                },
                out,
            )
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out_dir,
            mode,
            iterations,
            threshold,
            max_iterations,
        } => {
            let (mut cfg, overrides) = common.load()?;
            if let Some(m) = mode {
                cfg.eval.mode = match m {
                    ModeArg::Fixed => EvalMode::Fixed,
                    ModeArg::Adaptive => EvalMode::Adaptive,
                };
            }
            if let Some(i) = iterations {
                cfg.eval.iterations = i;
            }
            if let Some(t) = threshold {
                cfg.inference.threshold = t;
            }
            if let Some(m) = max_iterations {
                cfg.inference.max_iterations = m;
            }
            cfg.validate()?;
            let data = data.unwrap_or_else(|| cfg.paths.test_data.clone());
            let dir = out_dir.unwrap_or_else(|| cfg.paths.eval_dir.clone());
            commands::eval(&cfg, &overrides, &checkpoint, &data, &dir, out).map(drop)
        }
        Command::Analyze {
            common,
            evals,
            out_dir,
        } => {
            let (cfg, _) = common.load()?;
            let dir = out_dir.unwrap_or_else(|| cfg.paths.analysis_dir.clone());
            commands::analyze(&evals, &dir, out).map(drop)
        }
    }
}
