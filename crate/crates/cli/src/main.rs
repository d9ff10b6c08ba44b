use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod exit;

use exit::Failure;

#[derive(Parser, Debug)]
#[command(
    name = "bayesseg",
    version,
    about = "Bayesian encoder-decoder segmentation with Monte Carlo dropout"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes dataset
    Synth(SynthArgs),
    /// Train a model and write a checkpoint with finalized batch-norm statistics
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write CSV reports
    Eval(EvalArgs),
    /// Segment one image and write its uncertainty map
    Predict(PredictArgs),
    /// Accuracy as a function of the number of Monte Carlo samples
    Study(StudyArgs),
    /// Finite-difference check of every layer's gradient
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image size as HxW
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    /// Number of classes including background
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(2..=6))]
    classes: u8,
    /// Pixel frequency of the last class relative to each other shape class
    #[arg(long, default_value_t = 1.0)]
    rare_class_ratio: f32,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` run configuration
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch log as CSV
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum EvalMode {
    /// Weight averaging: dropout off
    Wa,
    /// Monte Carlo dropout sampling
    Mc,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: EvalMode,
    #[arg(long, default_value_t = bayesseg::bayes::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report_dir: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image (binary PPM)
    #[arg(long)]
    image: PathBuf,
    /// Output label map (binary PGM)
    #[arg(long)]
    out_seg: PathBuf,
    /// Output uncertainty map (binary PGM, dark = uncertain)
    #[arg(long)]
    out_unc: PathBuf,
    #[arg(long, default_value_t = bayesseg::bayes::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the variation-ratio map here
    #[arg(long)]
    variation_ratio: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "1,2,4,6,8,10,20,30,40,50"
    )]
    t_list: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// First of the 20 seeds to check
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturb one layer's adjoint (for testing the checker)
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad extent `{v}`"))
    };
    Ok((parse(h)?, parse(w)?))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Study(a) => commands::study(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                exit::FLAGS
            } else {
                exit::OK
            });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
