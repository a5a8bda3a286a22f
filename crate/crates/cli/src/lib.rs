//! Command-line driver: simulation, training, evaluation, label refinement
//! and gradient checks, with TOML configuration and reproducible outputs.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod output;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const NON_FINITE: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error("{0}")]
    NonFinite(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Io(_) => exit::IO,
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
            CliError::NonFinite(_) => exit::NON_FINITE,
        }
    }
}

impl From<dualview_core::Error> for CliError {
    fn from(e: dualview_core::Error) -> Self {
        use dualview_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { .. } | E::Malformed(_) | E::DimensionMismatch { .. } | E::ArchitectureMismatch(_) => {
                CliError::Io(msg)
            }
            E::NonFinite(_) => CliError::NonFinite(msg),
            E::InvalidConfig(_) | E::Empty(_) | E::RejectedSample(_) => CliError::Usage(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dualview", version, about = "Single-view to dual-view gaze adaptation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Named starting configuration (default, quick).
    #[arg(long, default_value = "default")]
    pub preset: String,
    /// TOML file with dotted keys, e.g. `adapt.lambda_stb = 50`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set sim.noise.sigma1=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the pre-training, rig and probe datasets.
    Sim {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Yaw of camera 2 relative to camera 1 (fixed rig).
        #[arg(long)]
        rig_yaw_deg: Option<f64>,
    },
    /// Supervised training on the single-view set.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by `sim`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Training log; defaults to the checkpoint path with `.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Unsupervised adaptation on the unlabeled rig set.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Pre-trained checkpoint.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Drop the head-pose stabilization term.
        #[arg(long)]
        no_stb: bool,
        /// Drop the pre-training replay term.
        #[arg(long)]
        no_pre: bool,
    },
    /// Metric report for one checkpoint, or a before/after comparison.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "untrained")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the freshly initialized model instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
        /// Second checkpoint; the report then includes relative changes.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = output::Split::Probe)]
        split: output::Split,
        /// Report document to write.
        #[arg(long)]
        out: PathBuf,
        /// Directory for the binned CSV tables; defaults to the report's.
        #[arg(long)]
        csv_dir: Option<PathBuf>,
    },
    /// Refine noisy multi-camera head labels.
    Refine {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Multi-camera recording file.
        #[arg(long)]
        input: PathBuf,
        /// Generate a synthetic recording into `--input` first.
        #[arg(long)]
        synthesize: bool,
        #[arg(long)]
        out: PathBuf,
        /// Weight of the L1 penalty on the rotation corrections.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        configs: Option<usize>,
        /// Perturb analytic gradients so the check must fail.
        #[arg(long, hide = true)]
        corrupt: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sim { cfg, out, rig_yaw_deg } => commands::sim(&cfg, &out, rig_yaw_deg),
        Command::Pretrain {
            cfg,
            data,
            out,
            log,
            iterations,
        } => commands::pretrain(&cfg, &data, &out, log, iterations),
        Command::Adapt {
            cfg,
            data,
            init,
            out,
            log,
            iterations,
            no_stb,
            no_pre,
        } => commands::adapt(&cfg, &data, &init, &out, log, iterations, no_stb, no_pre),
        Command::Eval {
            cfg,
            data,
            checkpoint,
            untrained: _,
            compare,
            split,
            out,
            csv_dir,
        } => commands::eval(&cfg, &data, checkpoint.as_deref(), compare.as_deref(), split, &out, csv_dir),
        Command::Refine {
            cfg,
            input,
            synthesize,
            out,
            delta,
        } => commands::refine(&cfg, &input, synthesize, &out, delta),
        Command::Gradcheck {
            cfg,
            configs,
            corrupt,
            out,
        } => commands::gradcheck(&cfg, configs, corrupt, out.as_deref()),
    }
}
