//! `seld`: feature extraction, toy training, inference, scoring,
//! scan benchmarking and complexity reporting.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use run::{classify, Context};

#[derive(Parser, Debug)]
#[command(name = "seld", version, about = "Stereo sound event localization and detection")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Worker threads for per-clip parallelism; 1 is bit-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Random seed.
    #[arg(long, global = true, env = "SELD_SEED", default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract 7-channel features for every clip of a manifest.
    Features(FeaturesArgs),
    /// Write a synthetic dataset (WAV + label CSV per clip, plus a manifest).
    Synth(SynthArgs),
    /// Train the tiny configuration on synthetic (or listed) clips.
    TrainToy(TrainArgs),
    /// Run a checkpoint over a manifest and write detected events.
    Infer(InferArgs),
    /// Score predicted events against reference events.
    Eval(EvalArgs),
    /// Time chunked and sequential scans over doubling lengths.
    BenchScan(BenchArgs),
    /// Report analytic parameter and MAC counts of a configuration.
    Count(CountArgs),
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    /// Manifest of `audio_path[,label_path]` lines.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    clips: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Model config (`key=value` lines); tiny defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path; the loss curve is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Train on this manifest instead of synthetic clips.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic clips to generate when no manifest is given.
    #[arg(long, default_value_t = 20)]
    clips: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest of audio files; each is cut into 5 s clips.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output event CSV. Clip `k` of the manifest occupies frames `50k..50k+49`.
    #[arg(long)]
    out: PathBuf,
    /// Activity threshold on the track vector norm.
    #[arg(long, default_value_t = seld_core::maccdoa::ACTIVITY_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Mirror rear azimuths to the front before matching.
    #[arg(long)]
    fold_frontback: bool,
    #[arg(long, default_value_t = seld_core::metrics::DEFAULT_ANGLE_THRESHOLD_DEG)]
    threshold_deg: f64,
    /// Also write the report (and a per-class CSV) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// `MIN..MAX`, doubled from MIN up to MAX.
    #[arg(long, default_value = "1024..32768")]
    lengths: String,
    #[arg(long, default_value_t = 64)]
    d_state: usize,
    #[arg(long, default_value_t = 64)]
    chunk: usize,
    /// Repetitions per length; the median is reported.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    /// Model config file; overrides `--variant`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    variant: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let ctx = match Context::new(&cli.workdir, cli.threads, cli.seed) {
        Ok(c) => c,
        Err(e) => return report_failure(e),
    };
    let result = match &cli.command {
        Command::Features(a) => commands::features(&ctx, a),
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::TrainToy(a) => commands::train_toy(&ctx, a),
        Command::Infer(a) => commands::infer(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::BenchScan(a) => commands::bench_scan(&ctx, a),
        Command::Count(a) => commands::count(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_failure(e),
    }
}

fn report_failure(e: anyhow::Error) -> ExitCode {
    let (code, kind) = classify(&e);
    // error types that embed their source would otherwise repeat it
    let mut msg = String::new();
    for cause in e.chain() {
        let c = cause.to_string();
        if !msg.contains(&c) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&c);
        }
    }
    let msg = msg.replace(['\n', '"'], " ");
    eprintln!("error kind={kind} code={code} message=\"{msg}\"");
    ExitCode::from(code)
}
