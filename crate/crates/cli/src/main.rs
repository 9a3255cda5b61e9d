//! `xlda-kit`: one binary for every stage of the pipeline.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when the command
//! itself fails (bad input data, infeasible constraints, I/O).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xlda_core::corpus::LanguageClass;
use xlda_core::{MaskPolicy, SplitPolicy, Stage};

#[derive(Parser, Debug)]
#[command(name = "xlda-kit", version, about = "Cross-lingual packing, masking and scheduling toolkit", arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for every random stream; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print reports as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    /// Do not echo the effective config to stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Keep the top-scoring fraction of documents.
    Filter(FilterArgs),
    /// Language sampling distribution and mixture report.
    Plan(PlanArgs),
    /// Pack a corpus into fixed-length sequences.
    Pack(PackArgs),
    /// Show the attention mask of one packed sequence.
    Mask(MaskArgs),
    /// Learning-rate and batch-size table.
    Schedule(ScheduleArgs),
    /// Learning-rate and vocabulary scaling factors between two runs.
    Advise(AdviseArgs),
    /// Train the toy transformer on a packed file.
    TrainToy(TrainArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(GradCheckArgs),
    /// Synthetic bilingual transfer experiment.
    Transfer(TransferArgs),
    /// Cross-lingual consistency metrics from a correctness log.
    EvalConsistency(ConsistencyArgs),
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub stage: Option<Stage>,
    /// Treat every document as this class instead of inferring per language.
    #[arg(long)]
    pub class: Option<LanguageClass>,
    /// Keep fraction overriding the stage preset.
    #[arg(long)]
    pub keep: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    /// Corpus records or a JSON stats object.
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Prior as `lang=p,...`.
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Token budget for target counts and epochs.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Also show the annealing-stage plan (multilingual share tripled).
    #[arg(long)]
    pub anneal: bool,
}

#[derive(Args, Debug)]
pub struct PackArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub split: Option<SplitPolicy>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<String>,
}

#[derive(Args, Debug)]
pub struct MaskArgs {
    #[arg(long, default_value = "xlda")]
    pub policy: MaskPolicy,
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Emit the dense 0/1 grid (PBM) instead of spans.
    #[arg(long)]
    pub dense: bool,
    /// Materialise even above the dense size cap.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub peak: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub total: Option<u64>,
    #[arg(long)]
    pub decay_frac: Option<f64>,
    #[arg(long)]
    pub final_ratio: Option<f64>,
    /// Row spacing in steps (default: total / 20); phase boundaries are always listed.
    #[arg(long)]
    pub every: Option<u64>,
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args, Debug)]
pub struct AdviseArgs {
    #[arg(long)]
    pub params_from: f64,
    #[arg(long)]
    pub tokens_from: f64,
    #[arg(long)]
    pub params_to: f64,
    #[arg(long)]
    pub tokens_to: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub packed: PathBuf,
    #[arg(long, default_value = "xlda")]
    pub policy: MaskPolicy,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub peak: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Write trained parameters as little-endian f64.
    #[arg(long)]
    pub save: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long, default_value = "bridge")]
    pub policy: MaskPolicy,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConsistencyArgs {
    #[arg(long)]
    pub pairs: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
