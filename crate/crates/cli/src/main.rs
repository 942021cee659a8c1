mod commands;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmlnet::Error;

#[derive(Parser, Debug)]
#[command(name = "mmlnet", version, about = "Misinformation recognition under missing words and image patches")]
pub struct Cli {
    /// Experiment config (TOML with model / loss / train / data sections).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides train.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Config override, `key=value` (repeatable), e.g. `--override train.epochs=3`.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw word and patch masks for every sample of a manifest.
    Corrupt(CorruptArgs),
    /// Train one model on a manifest and its masks.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Evaluate(EvaluateArgs),
    /// Train and evaluate one model per missing-rate scenario.
    Sweep(SweepArgs),
    /// Train the base model and one variant per toggle set, and compare.
    Ablate(AblateArgs),
    /// Merge run directories into the scenario grid table.
    Report(ReportArgs),
    /// Manifest utilities.
    Datasets {
        #[command(subcommand)]
        command: DatasetsCommand,
    },
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Text missing rate; defaults to data.text_rate.
    #[arg(long)]
    pub text_rate: Option<u8>,
    /// Image missing rate; defaults to data.image_rate.
    #[arg(long)]
    pub image_rate: Option<u8>,
    /// Write one mask file per grid scenario.
    #[arg(long, conflicts_with_all = ["text_rate", "image_rate"])]
    pub grid: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Mask file matching the configured rates.
    #[arg(long)]
    pub masks: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Mask file; drawn from the checkpoint's rates and the seed when absent.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Load even if the checkpoint was written under a different config.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub test_manifest: PathBuf,
    /// Scenario tags such as `t25_i75`; the whole grid when omitted.
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Vec<String>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub train_manifest: PathBuf,
    #[arg(long)]
    pub test_manifest: PathBuf,
    /// A comma-separated toggle set (repeatable), e.g. `--variant drop_Lm_h,drop_Lm_r,drop_Lm_f`.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories containing metrics.jsonl.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum DatasetsCommand {
    /// Check a manifest and print a summary.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write a synthetic train/test manifest pair into the output directory.
    Generate {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0.8)]
        separation: f64,
        #[arg(long, default_value_t = 0.4)]
        noise: f64,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
}

/// Exit codes: 0 success, 1 usage or config error, 2 data error, 3 internal error.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::InvalidInput(_) | Error::Parse { .. } | Error::Io { .. } | Error::UndefinedMetric(_) | Error::Checkpoint(_) => 2,
        Error::Invariant(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let argv: Vec<String> = std::env::args().collect();
    match commands::run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
