//! `holitok`: training, verification, codec file I/O and rate reports.
//!
//! Exit codes: 0 success, 1 check failure or violated invariant, 2 usage
//! error (bad flags, bad or missing input files, config problems).

mod audio;
mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use holitok::unified::Tasks;
use holitok::verify::Suite;

#[derive(Parser, Debug)]
#[command(name = "holitok", version, about = "Continuous speech tokenizer and unified speech model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the tokenizer stage by stage, or the downstream model.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Waveform to latent file and back through a tokenizer checkpoint.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Run a verification suite and write a JSON report.
    Verify(VerifyArgs),
    /// Print the compression ratio and token rate of a preset.
    ReportCr(ReportArgs),
    /// Text to waveform through a trained downstream model.
    Synthesize(SynthesizeArgs),
    /// Waveform to text through a trained downstream model.
    Transcribe(TranscribeArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// JSON file overriding configuration defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum TrainCommand {
    Tokenizer(TrainTokenizerArgs),
    Downstream(TrainDownstreamArgs),
}

#[derive(Args, Debug)]
pub struct TrainTokenizerArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=3))]
    stage: u32,
    /// Checkpoint of the previous stage; defaults to the one in `--out`.
    #[arg(long)]
    from: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct TrainDownstreamArgs {
    #[arg(long, value_parser = parse_tasks)]
    tasks: Tasks,
    /// Frozen tokenizer checkpoint; may also come from the config file.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Downstream checkpoint whose DiT weights initialize this run.
    #[arg(long)]
    dit_init: Option<PathBuf>,
    /// Keep the semantic encoder fixed (mean_pool_linear mode only).
    #[arg(long)]
    freeze_semantic_encoder: bool,
    #[command(flatten)]
    common: CommonArgs,
}

fn parse_tasks(s: &str) -> Result<Tasks, String> {
    s.parse().map_err(|e: holitok::Error| e.to_string())
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: holitok::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
enum CodecCommand {
    /// Waveform (WAV or raw f32) to latent file.
    Encode(EncodeArgs),
    /// Latent file to waveform.
    Decode(DecodeArgs),
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Rate of raw input files; defaults to the checkpoint's rate.
    #[arg(long)]
    sample_rate: Option<u32>,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(value_parser = parse_suite)]
    suite: Suite,
    /// Also run forward-only checks at the full-scale configuration.
    #[arg(long)]
    paper_preset: bool,
    /// Tokenizer trained through Stage II for the fidelity bound.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; defaults to `verify_<suite>.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, default_value = "paper")]
    preset: String,
    /// Override the latent dimension.
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    /// Output directory of `train downstream`.
    #[arg(long)]
    model: PathBuf,
    /// Symbols as hex digits, e.g. `3a1f`.
    #[arg(long)]
    text: String,
    /// Description prefix: `low` or `high`.
    #[arg(long)]
    desc: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    output: PathBuf,
}

#[derive(Args, Debug)]
pub struct TranscribeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Rate of raw input files; defaults to the tokenizer's rate.
    #[arg(long)]
    sample_rate: Option<u32>,
    input: PathBuf,
}

/// A check or invariant that did not hold.
#[derive(Debug)]
pub struct Failure(pub String);

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use holitok::Error as E;
    if err.downcast_ref::<Failure>().is_some() {
        return 1;
    }
    match err.downcast_ref::<E>() {
        Some(
            E::Shape { .. }
            | E::NonFinite { .. }
            | E::ZeroNorm { .. }
            | E::FlowInvertibility { .. }
            | E::UnknownParameter(_)
            | E::DuplicateParameter(_),
        ) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(TrainCommand::Tokenizer(a)) => commands::train_tokenizer(a),
        Command::Train(TrainCommand::Downstream(a)) => commands::train_downstream(a),
        Command::Codec(CodecCommand::Encode(a)) => commands::codec_encode(a),
        Command::Codec(CodecCommand::Decode(a)) => commands::codec_decode(a),
        Command::Verify(a) => commands::verify(a),
        Command::ReportCr(a) => commands::report_cr(a),
        Command::Synthesize(a) => commands::synthesize(a),
        Command::Transcribe(a) => commands::transcribe(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
