//! `she`: detection, mitigation and evaluation pipelines over exported
//! embedding archives.
//!
//! Exit status: 0 on success, 2 when inputs or parameters are invalid, 3 when
//! a file cannot be read or written.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "she", version, about = "Behavioral hallucination detection and mitigation")]
struct Cli {
    /// TOML file with [detect], [mitigate] and [snowball] defaults
    #[arg(long, global = true, env = "SHE_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus with planted ground truth
    Synth(SynthArgs),
    /// Score every annotated behavior against its image sequence
    Detect(DetectArgs),
    /// Project hallucinated behavior directions out of patch embeddings
    Mitigate(MitigateArgs),
    /// Compute BEACH, CHAIR, mAP and hallucination rates
    Eval(EvalArgs),
    /// Co-occurrence scores of hallucinated behaviors, with control samples
    Cooccur(CooccurArgs),
    /// Segment-wise perturbation experiment with the stub captioner
    Snowball(SnowballArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// TOML file with generator parameters; defaults are used when omitted
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the seed of the spec
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_archive: PathBuf,
    #[arg(long)]
    pub out_annotations: PathBuf,
}

#[derive(Args)]
pub struct LayerArgs {
    /// Text layer for behavior embeddings [default: first detection layer]
    #[arg(long, env = "SHE_TEXT_LAYER")]
    pub text_layer: Option<usize>,
    /// Image layers to score, comma separated [default: ceil(2D/3)..D-1]
    #[arg(long, env = "SHE_LAYERS", value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
}

#[derive(Args)]
pub struct DetectArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Window scale applied to embedding entropy [default: 0.5]
    #[arg(long, env = "SHE_GAMMA")]
    pub gamma: Option<f64>,
    /// Confidence below which a behavior is flagged [default: 0.5]
    #[arg(long, env = "SHE_THETA")]
    pub theta: Option<f64>,
    #[command(flatten)]
    pub layers: LayerArgs,
    /// Accept unknown annotation fields with a warning
    #[arg(long)]
    pub lenient: bool,
    /// Detection records, one JSON object per line
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct MitigateArgs {
    #[arg(long)]
    pub archive: PathBuf,
    /// Output of `she detect`
    #[arg(long)]
    pub detections: PathBuf,
    /// Base strength; per patch alpha = alpha_base * (1 - confidence) [default: 4.5]
    #[arg(long, env = "SHE_ALPHA_BASE")]
    pub alpha_base: Option<f64>,
    /// Use one fixed strength instead of the confidence-scaled one
    #[arg(long, env = "SHE_FIXED_ALPHA")]
    pub fixed_alpha: Option<f64>,
    /// Behavior direction: span-mean or first-token [default: span-mean]
    #[arg(long, value_parser = parse_direction)]
    pub direction: Option<she_core::DirectionMode>,
    #[command(flatten)]
    pub layers: LayerArgs,
    #[arg(long)]
    pub out_archive: PathBuf,
    /// One CSV row per corrected behavior
    #[arg(long)]
    pub out_log: PathBuf,
}

fn parse_direction(s: &str) -> Result<she_core::DirectionMode, String> {
    match s {
        "span-mean" => Ok(she_core::DirectionMode::SpanMean),
        "first-token" => Ok(she_core::DirectionMode::FirstToken),
        other => Err(format!("unknown direction `{other}` (span-mean, first-token)")),
    }
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// Metrics as JSON fractions
    #[arg(long)]
    pub out: PathBuf,
    /// Percentages as CSV; printed to stdout when omitted
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Args)]
pub struct CooccurArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    /// Seed for control sampling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV histogram of CoS-BH, observed against control
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Args)]
pub struct SnowballArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Carryover bias per previous emission, in [0, 1) [default: 0.5]
    #[arg(long, env = "SHE_CARRYOVER")]
    pub carryover: Option<f64>,
    /// Emission threshold of the stub captioner [default: 0.22]
    #[arg(long, env = "SHE_EMISSION_THRESHOLD")]
    pub emission_threshold: Option<f64>,
    /// [default: 100]
    #[arg(long, env = "SHE_TRIALS")]
    pub trials: Option<usize>,
    /// [default: 0]
    #[arg(long, env = "SHE_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lenient: bool,
    /// CSV of (segment, mean ΔBH, std ΔBH, kind)
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = config::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Detect(a) => commands::detect(a, &cfg),
        Command::Mitigate(a) => commands::mitigate(a, &cfg),
        Command::Eval(a) => commands::eval(a),
        Command::Cooccur(a) => commands::cooccur(a),
        Command::Snowball(a) => commands::snowball(a, &cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
