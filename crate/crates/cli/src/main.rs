//! `cmask` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or parameter error, 3 file-format error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use cmask::data::Source;
use cmask::loss::LossKind;
use cmask::masking::OracleKind;
use cmask::model::MaskType;

mod commands;
mod config;
mod dump;

#[derive(Parser, Debug)]
#[command(
    name = "cmask",
    version,
    about = "Spectral-mask source separation: train, separate, oracle, evaluate"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Working sample rate in Hz; other inputs are resampled.
    #[arg(long, global = true, default_value_t = 22050)]
    sample_rate: u32,

    /// STFT window length in samples.
    #[arg(long, global = true, default_value_t = 1024)]
    window: usize,

    /// STFT hop in samples.
    #[arg(long, global = true, default_value_t = 256)]
    hop: usize,

    /// Flat `key=value` file of defaults; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one source's model on `<track>/{vocals,guitar,bass,percussion,other}.wav`.
    Train(TrainArgs),
    /// Separate a mixture with one or more trained models.
    Separate(SeparateArgs),
    /// Separate with an ideal mask and report its quality.
    Oracle(OracleArgs),
    /// Report SDR and SI-SDR of estimates against references.
    Evaluate(EvaluateArgs),
    /// Write a model's mask magnitude and phase as PGM images or CSV.
    DumpMask(DumpMaskArgs),
    /// Write a synthetic multi-stem track.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// A track directory, or a directory of track directories.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "vocals")]
    source: Source,
    #[arg(long, default_value = "complex")]
    mask: MaskType,
    /// mag, sdr or sdr+mag (default: mag for real masks, sdr for complex).
    #[arg(long)]
    loss: Option<LossKind>,
    /// Encoder depth (default: the length of --channels, or 6).
    #[arg(long)]
    depth: Option<usize>,
    /// Encoder channel counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Augmented variants per track in addition to the original.
    #[arg(long, default_value_t = 10)]
    augmentations: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Validation interval in steps (0: only at the end).
    #[arg(long, default_value_t = 100)]
    validate_every: usize,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss log (default: the checkpoint path with a .csv extension).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SeparateArgs {
    /// Checkpoint; repeat for several sources.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// File listing one checkpoint path per line.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    mixture: PathBuf,
    #[arg(long)]
    source: PathBuf,
    /// irm, cirm or cirm-clipped.
    #[arg(long, default_value = "cirm-clipped")]
    mask: OracleKind,
    /// Where to write the estimate.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Reference WAV; repeat to evaluate several pairs.
    #[arg(long = "reference", required = true)]
    references: Vec<PathBuf>,
    /// Estimate WAV, paired with --reference in order.
    #[arg(long = "estimate", required = true)]
    estimates: Vec<PathBuf>,
    /// Report name per pair (default: the estimate's file stem).
    #[arg(long = "name")]
    names: Vec<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct DumpMaskArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    outdir: PathBuf,
    #[arg(long, default_value = "pgm")]
    format: dump::Format,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    outdir: PathBuf,
    /// Length in seconds.
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
}

fn exit_code(err: &cmask::Error) -> u8 {
    if err.is_format_error() {
        3
    } else {
        2
    }
}

fn parse() -> std::result::Result<Cli, ExitCode> {
    let args: Vec<_> = std::env::args_os().collect();
    let clap_exit = |e: clap::Error| {
        let _ = e.print();
        ExitCode::from(if e.use_stderr() { 2 } else { 0 })
    };
    let matches = Cli::command()
        .try_get_matches_from(&args)
        .map_err(clap_exit)?;
    let matches = match config::merge(&matches, &args) {
        Ok(Some(args)) => Cli::command()
            .try_get_matches_from(args)
            .map_err(clap_exit)?,
        Ok(None) => matches,
        Err(e) => {
            eprintln!("error: {e}");
            return Err(ExitCode::from(exit_code(&e)));
        }
    };
    Cli::from_arg_matches(&matches).map_err(clap_exit)
}

fn main() -> ExitCode {
    let cli = match parse() {
        Ok(cli) => cli,
        Err(code) => return code,
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
