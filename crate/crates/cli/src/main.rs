mod commands;
mod plot;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

/// Weakly referring expression learning: data, training and evaluation.
#[derive(Parser, Debug)]
#[command(name = "wrel", version)]
struct Cli {
    /// Log progress (-v for info, -vv for debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic referring-segmentation dataset.
    Synth(SynthArgs),
    /// Partition a dataset into accurate and weak subsets.
    Split(SplitArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Sweep one LRB knob and emit a metrics table.
    Ablate(AblateArgs),
    /// Measure the risk gap against expression corruption.
    BoundProbe(ProbeArgs),
}

/// Config file plus dotted overrides, shared by the training commands.
#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.stage3.inner_steps=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Dataset locations that take precedence over `[data]` in the config.
#[derive(Args, Debug)]
pub struct DataArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Precomputed split.json; otherwise the `[split]` section is applied.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    /// Validation dataset directory.
    #[arg(long)]
    pub val: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probability of dropping each attribute from the weak expression.
    #[arg(long, default_value_t = 1.0)]
    pub q: f64,
    #[arg(long, default_value_t = 32)]
    pub grid_size: usize,
    #[arg(long, default_value_t = 4)]
    pub max_instances: usize,
    /// Replace a nonempty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Accurate share in percent: 10, 30 or 50.
    #[arg(long, default_value_t = 10)]
    pub ratio: u32,
    /// Accept any percentage in 1..=99.
    #[arg(long)]
    pub ratio_custom: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample uniformly instead of per category.
    #[arg(long)]
    pub no_stratify: bool,
    /// Output file; defaults to `<dataset>/split.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// warmup, lrb, joint or all.
    #[arg(long, default_value = "all")]
    pub stage: String,
    /// only-accurate, wrel or lrb-wrel.
    #[arg(long, default_value = "lrb-wrel")]
    pub mode: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Save a checkpoint every N epochs of each stage (0 = only the final one).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub force: bool,
    /// Write loss and validation curves as PNG.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory (a run's `final/` or a `stageS-epochK/`).
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub ckpt: Option<PathBuf>,
    /// Score the ground-truth oracle instead of a checkpoint.
    #[arg(long)]
    pub oracle: bool,
    /// val or test.
    #[arg(long, default_value = "val")]
    pub split: String,
    /// student or teacher.
    #[arg(long, default_value = "student")]
    pub which: String,
    /// Dataset to score; defaults to the split's path in the run's config.toml.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// steps, freq or warmup.
    #[arg(long)]
    pub knob: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for the JSON report and table.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub plot: bool,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub plot: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();

    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::BoundProbe(a) => commands::bound_probe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
