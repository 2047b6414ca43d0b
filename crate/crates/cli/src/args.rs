use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use ldgm_core::data::SourceFormat;
use ldgm_core::diffusion::{CorruptionStrategy, DecouplingLevel, NoiseType};
use ldgm_core::inference::{DecodeStrategy, Task};

#[derive(Debug, Parser)]
#[command(name = "ldgm", version, about = "Discrete-diffusion layout generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus directory.
    SynthData(SynthArgs),
    /// Convert a JSON, COCO or Rico source into a corpus directory.
    Ingest(IngestArgs),
    /// Train a denoiser on a corpus.
    Train(TrainArgs),
    /// Corrupt corpus layouts with one forward-process draw, for inspection.
    Corrupt(CorruptArgs),
    /// Build a task from each corpus layout and decode it.
    Generate(GenerateArgs),
    /// Score generated layouts.
    Eval(EvalArgs),
    /// Sweep corruption strategies, noise types, decoupling levels and decoders.
    Ablate(AblateArgs),
    /// Run the HTTP generation service.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::Ingest(_) => "ingest",
            Command::Train(_) => "train",
            Command::Corrupt(_) => "corrupt",
            Command::Generate(_) => "generate",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Serve(_) => "serve",
        }
    }
}

fn parse_with<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    T::from_str(s).map_err(|e| e.to_string())
}

fn task(s: &str) -> Result<Task, String> {
    parse_with(s)
}

fn decoder(s: &str) -> Result<DecodeStrategy, String> {
    parse_with(s)
}

fn corruption(s: &str) -> Result<CorruptionStrategy, String> {
    parse_with(s)
}

fn noise(s: &str) -> Result<NoiseType, String> {
    parse_with(s)
}

fn level(s: &str) -> Result<DecouplingLevel, String> {
    parse_with(s)
}

fn source_format(s: &str) -> Result<SourceFormat, String> {
    parse_with(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Json,
    Csv,
}

fn table_format(s: &str) -> Result<TableFormat, String> {
    match s {
        "json" => Ok(TableFormat::Json),
        "csv" => Ok(TableFormat::Csv),
        other => Err(format!("unknown format `{other}` (expected json or csv)")),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator settings (JSON); defaults apply to absent keys.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Corpus directory to create.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Source file or directory.
    #[arg(long, value_name = "PATH")]
    pub corpus: PathBuf,
    /// Source format: json, coco or rico.
    #[arg(long, value_name = "NAME", value_parser = source_format)]
    pub format: SourceFormat,
    /// Ingest settings (JSON): name, policy, vocabulary, max_n, fractions.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Split seed.
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training settings (JSON); defaults to the toy configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub corpus: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Corruption strategy.
    #[arg(long, value_name = "NAME", value_parser = corruption)]
    pub strategy: Option<CorruptionStrategy>,
    /// Geometry noise type.
    #[arg(long, value_name = "NAME", value_parser = noise)]
    pub noise: Option<NoiseType>,
    #[arg(long, value_name = "NAME", value_parser = level)]
    pub level: Option<DecouplingLevel>,
    /// Total optimizer steps.
    #[arg(long, value_name = "INT")]
    pub steps: Option<u64>,
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Directory for checkpoints and the JSON-lines log.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    /// Training settings (JSON) supplying the schedule.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub corpus: PathBuf,
    #[arg(long, value_name = "NAME", value_parser = corruption)]
    pub strategy: Option<CorruptionStrategy>,
    #[arg(long, value_name = "NAME", value_parser = noise)]
    pub noise: Option<NoiseType>,
    #[arg(long, value_name = "NAME", value_parser = level)]
    pub level: Option<DecouplingLevel>,
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Corpus providing the source layouts.
    #[arg(long, value_name = "PATH")]
    pub corpus: PathBuf,
    #[arg(long, value_name = "NAME", value_parser = task)]
    pub task: Task,
    /// Decoding strategy.
    #[arg(long, value_name = "NAME", value_parser = decoder, default_value = "confidence-topk")]
    pub strategy: DecodeStrategy,
    /// Decoding steps; the model's number of timesteps when absent.
    #[arg(long, value_name = "INT")]
    pub steps: Option<usize>,
    #[arg(long, value_name = "INT", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "FLOAT", default_value_t = 1.0)]
    pub temperature: f64,
    /// Reset precise attributes to their inputs after every step.
    #[arg(long)]
    pub clamp: bool,
    /// Record the per-step layouts.
    #[arg(long)]
    pub trajectory: bool,
    /// Generation settings (JSON): split, limit, relation_fraction, coarse_std.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Output of `generate`, or a corpus directory scored against itself.
    #[arg(long, value_name = "PATH")]
    pub corpus: PathBuf,
    /// Evaluation settings (JSON): pairing, feature_steps, split, k_geometry.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed of the FID feature extractor.
    #[arg(long, value_name = "INT", default_value_t = 0)]
    pub seed: u64,
    /// json or csv.
    #[arg(long, value_name = "NAME", value_parser = table_format, default_value = "json")]
    pub format: TableFormat,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Sweep settings (JSON); defaults apply to absent keys.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub corpus: PathBuf,
    #[arg(long, value_name = "NAME", value_parser = task)]
    pub task: Option<Task>,
    /// Training steps per configuration.
    #[arg(long, value_name = "INT")]
    pub steps: Option<u64>,
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// json or csv.
    #[arg(long, value_name = "NAME", value_parser = table_format, default_value = "json")]
    pub format: TableFormat,
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Corpus whose vocabulary names the categories.
    #[arg(long, value_name = "PATH")]
    pub corpus: Option<PathBuf>,
    /// Service settings (JSON): host, workers, queue, timeout_s.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "INT", default_value_t = 8080)]
    pub port: u16,
}
