mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use failure::Failure;

#[derive(Parser)]
#[command(name = "trajfm", version, about = "GPS trajectory preprocessing, masked pretraining and evaluation")]
struct Cli {
    /// TOML config file; sections: paths, filter, resample, mask, model, synth.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
pub struct PathArgs {
    /// Overrides paths.input.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Overrides paths.output.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides paths.checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse every *.gpx in the input directory into JSONL.
    Ingest(PathArgs),
    /// Normalize to 1 Hz and filter; writes JSONL and a FilterReport.
    Preprocess {
        #[command(flatten)]
        paths: PathArgs,
        /// FilterReport path (default: <output>.report.json).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate synthetic trajectories as JSONL.
    Synth(PathArgs),
    /// Train the encoder-decoder; writes a checkpoint and a loss CSV.
    Pretrain {
        #[command(flatten)]
        paths: PathArgs,
        /// Loss history path (default: <checkpoint>.loss.csv).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset; writes a MetricReport.
    Eval {
        #[command(flatten)]
        paths: PathArgs,
        #[arg(long, value_enum, default_value_t = TaskArg::Recovery)]
        task: TaskArg,
        /// Optional reference JSONL for the density divergence of the input against it.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Print the hidden index set each trajectory would receive.
    MaskPreview {
        #[command(flatten)]
        paths: PathArgs,
        #[arg(long, value_enum, default_value_t = StrategyArg::Mixture)]
        strategy: StrategyArg,
        /// Number of trajectories to show.
        #[arg(long, default_value_t = 5)]
        limit: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TaskArg {
    /// Hide half the points at random.
    Recovery,
    /// Hide the last five points.
    Prediction,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Random,
    Block,
    KeyPoints,
    LastN,
    /// Draw a strategy per trajectory from the mask.w_* weights.
    Mixture,
}

fn resolve(cli: &Cli, paths: &PathArgs) -> Result<RunConfig, Failure> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(p) = &paths.input {
        cfg.paths.input = Some(p.clone());
    }
    if let Some(p) = &paths.output {
        cfg.paths.output = Some(p.clone());
    }
    if let Some(p) = &paths.checkpoint {
        cfg.paths.checkpoint = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.cmd {
        Cmd::Ingest(p) => commands::ingest(&resolve(&cli, p)?),
        Cmd::Preprocess { paths, report } => commands::preprocess(&resolve(&cli, paths)?, report.as_deref()),
        Cmd::Synth(p) => commands::synth(&resolve(&cli, p)?),
        Cmd::Pretrain { paths, loss_csv } => commands::pretrain(&resolve(&cli, paths)?, loss_csv.as_deref()),
        Cmd::Eval { paths, task, reference } => commands::eval(&resolve(&cli, paths)?, *task, reference.as_deref()),
        Cmd::MaskPreview { paths, strategy, limit } => {
            commands::mask_preview(&resolve(&cli, paths)?, *strategy, *limit)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let keys = config::keys_help();
    let mut cmd = Cli::command().after_long_help(keys.clone());
    for name in ["ingest", "preprocess", "synth", "pretrain", "eval", "mask-preview"] {
        cmd = cmd.mut_subcommand(name, |sc| sc.after_help(keys.clone()));
    }
    let parsed = cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m));
    let result = match parsed {
        Ok(cli) => run(cli),
        // --help and --version are not failures.
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            Err(Failure::config(first.trim_start_matches("error: ")))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.code as u8)
        }
    }
}
