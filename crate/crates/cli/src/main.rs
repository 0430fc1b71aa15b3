use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualseq::encoder::Variant;
use dualseq::evaluation::Task;
use dualseq_cli::{
    cmd_ablate, cmd_evaluate, cmd_generate, cmd_gradcheck, cmd_train, load_config, CliError,
    Overrides,
};

#[derive(Parser)]
#[command(
    name = "dualseq",
    version,
    about = "Dual item/scene sequence recommender"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// next-item, period-item or next-scene
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    #[arg(long)]
    workers: Option<usize>,
    /// dual, one-to-one or item-only
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic interaction log and its ground-truth sidecar.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Log path; the sidecar goes next to it as `<stem>.truth.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on `data_path` and write a checkpoint and training report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory; defaults to `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the test split of a log with a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Interaction log; defaults to `data_path` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Metrics file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every operation and loss term.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate analytic gradients; the run must then fail.
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Train and score every variant of the configured ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Table file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: dualseq::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: dualseq::Error| e.to_string())
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            task: self.task,
            workers: self.workers,
            variant: self.variant,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides())?;
            cmd_generate(&cfg, &out)
        }
        Command::Train { common, out } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides())?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            cmd_train(&cfg, &dir)
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
            out,
        } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides())?;
            let data = match data {
                Some(d) => d,
                None => cfg.require_data()?.to_path_buf(),
            };
            cmd_evaluate(&cfg, &checkpoint, &data, out.as_deref())
        }
        Command::Gradcheck {
            instances,
            seed,
            inject_sign_flip,
        } => cmd_gradcheck(instances, seed, inject_sign_flip),
        Command::Ablate { common, out } => {
            let cfg = load_config(common.config.as_deref(), &common.overrides())?;
            cmd_ablate(&cfg, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
