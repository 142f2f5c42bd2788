mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 2).
    Usage(String),
    Core(msasr::Error),
}

impl From<msasr::Error> for CliError {
    fn from(e: msasr::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use msasr::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Argument(_)) => 2,
            CliError::Core(E::Dimension(_) | E::Format { .. } | E::Io(_) | E::Json(_)) => 3,
            CliError::Core(E::Divergence(_)) => 4,
            CliError::Core(E::State(_)) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "msasr", version, about = "Multi-stream joint CTC/attention speech recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-stream corpus
    Synth(SynthArgs),
    /// Train a recognizer
    Train(TrainArgs),
    /// Decode a manifest with a trained recognizer
    Decode(DecodeArgs),
    /// Score hypotheses against references
    Score(ScoreArgs),
    /// Add Gaussian noise to one stream of a manifest
    Corrupt(CorruptArgs),
    /// Train a character language model
    TrainLm(TrainLmArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Grammar name
    #[arg(long, default_value = "toy")]
    pub task: String,
    #[arg(long, default_value_t = 2)]
    pub streams: usize,
    #[arg(long, default_value_t = 200)]
    pub utts: usize,
    /// Rendering noise standard deviation
    #[arg(long, default_value_t = 0.3)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 6)]
    pub frames_per_token: usize,
    /// Seed of the letter templates; keep it equal across train/dev/test
    #[arg(long)]
    pub template_seed: Option<u64>,
    /// Probability that an utterance gets one degraded stream
    #[arg(long, default_value_t = 0.0)]
    pub degrade_prob: f64,
    #[arg(long, default_value_t = 1.0)]
    pub degrade_sigma: f64,
    /// Render every stream from the same templates
    #[arg(long)]
    pub shared_templates: bool,
    #[arg(long, default_value = "utt")]
    pub id_prefix: String,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Training manifest
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Dev manifest
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Vocabulary file (default: vocab.txt next to the training manifest)
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Output directory for checkpoints and the training log
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Recognizer checkpoint
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run configuration supplying beam and weights not given as flags
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// CTC weight λ
    #[arg(long)]
    pub ctc_weight: Option<f64>,
    /// Language-model checkpoint
    #[arg(long)]
    pub lm: Option<PathBuf>,
    /// Language-model weight γ
    #[arg(long)]
    pub lm_weight: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Hypothesis file (utt_id TAB text)
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-utterance attention JSON
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
    /// Worker threads (default: available cores)
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args)]
pub struct ScoreArgs {
    /// Reference text file or manifest (.jsonl)
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub hyp: PathBuf,
    /// char or word
    #[arg(long, default_value = "char")]
    pub unit: String,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args)]
pub struct CorruptArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Zero-based stream index
    #[arg(long)]
    pub stream: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainLmArgs {
    /// Training text: a text file (utt_id TAB text) or a manifest (.jsonl)
    #[arg(long)]
    pub text: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Output checkpoint
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub cells: usize,
    #[arg(long, default_value_t = 16)]
    pub embedding_dim: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Score(a) => commands::score(&a),
        Command::Corrupt(a) => commands::corrupt(&a),
        Command::TrainLm(a) => commands::train_lm(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
