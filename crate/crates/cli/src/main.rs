//! `dgf`: synthesize or ingest multi-domain series, train, evaluate,
//! forecast, and export latents.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dgf_core::{Error, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "dgf", version, about = "Latent-factor domain-generalization forecasting")]
pub struct Cli {
    /// TOML experiment config; every section is optional.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Run directory. Defaults to `$DGF_OUTPUT_ROOT/<command>`, or
    /// `runs/<command>` when the variable is unset.
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,

    /// Replace the contents of an existing run directory.
    #[arg(long, global = true)]
    pub overwrite: bool,

    #[command(flatten)]
    pub overrides: Overrides,

    /// Log verbosity (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override values from the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// One of full, e2e, no_reg, no_decomp, shared_only, no_cond, no_latent.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// CSV dataset to use instead of the synthetic generator.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub epochs_stage1: Option<usize>,
    #[arg(long, global = true)]
    pub epochs_stage2: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic dataset as CSV.
    Synth,
    /// Split one series into trend and seasonal parts.
    Decompose {
        /// Domain name; defaults to the first domain.
        #[arg(long)]
        domain: Option<String>,
        #[arg(long, default_value_t = 0)]
        series: usize,
        /// Moving-average kernel; defaults to `model.kernel`.
        #[arg(long)]
        kernel: Option<usize>,
    },
    /// Stage 1: pretrain the conditional VAE pair.
    Pretrain,
    /// Stage 2 (or the whole e2e schedule): train the forecaster.
    Train {
        /// Stage-1 checkpoint. Not needed for the e2e and no_latent variants.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Compute metric reports for the training and/or test domains.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Both)]
        split: SplitArg,
    },
    /// Write forecast quantiles for every window of a domain set.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Export posterior-mean latents and their separation score.
    DumpLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Multi-seed comparison of several variants.
    Ablate {
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', default_value = "full,e2e,no_reg,no_decomp,shared_only,no_cond")]
        variants: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Decompose { .. } => "decompose",
            Command::Pretrain => "pretrain",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Forecast { .. } => "forecast",
            Command::DumpLatents { .. } => "dump-latents",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Training => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
