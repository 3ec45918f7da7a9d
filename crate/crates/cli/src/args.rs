use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vidqa::assembly::ModalityMask;
use vidqa::decoding::{DecodeConfig, Strategy};
use vidqa::model::{ModelConfig, Precision};
use vidqa::train::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "vidqa", version, about = "Multimodal open-ended video QA on synthetic drama clips")]
pub struct Cli {
    /// TOML file with one table per command; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root for default input and output paths.
    #[arg(long, global = true, env = "VIDQA_OUT", default_value = "runs")]
    pub out_root: PathBuf,

    /// Re-execute a saved run manifest instead of a command.
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,

    /// With --manifest: write outputs here instead of the recorded directory.
    #[arg(long, requires = "manifest")]
    pub replay_out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/val/test corpora and print their statistics.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint, vocabulary and loss log.
    Train(TrainArgs),
    /// Decode every example of a corpus.
    Generate(GenerateArgs),
    /// Score a generations file against gold answers.
    Evaluate(EvaluateArgs),
    /// Compare decoding strategies on one checkpoint.
    BenchDecoding(BenchArgs),
    /// Train, decode and score one row per modality combination.
    Ablate(AblateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Generate(_) => "generate",
            Command::Evaluate(_) => "evaluate",
            Command::BenchDecoding(_) => "bench-decoding",
            Command::Ablate(_) => "ablate",
        }
    }
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("expected f32 or f64, got {other:?}")),
    }
}

/// Gradient clip threshold: a number, or `none` to disable clipping.
#[derive(Clone, Copy, Debug)]
pub struct Clip(pub Option<f64>);

impl std::str::FromStr for Clip {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "none" {
            return Ok(Clip(None));
        }
        s.parse::<f64>().map(|v| Clip(Some(v))).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long = "n")]
    pub n_examples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of questions answerable only from visual metadata.
    #[arg(long)]
    pub metadata_signal: Option<f64>,
    #[arg(long)]
    pub n_persons: Option<usize>,
    #[arg(long)]
    pub n_behaviors: Option<usize>,
    #[arg(long)]
    pub n_emotions: Option<usize>,
    #[arg(long)]
    pub video_dim: Option<usize>,
    #[arg(long)]
    pub bbox_dim: Option<usize>,
    #[arg(long)]
    pub box_noise: Option<f64>,
    /// Explicit split sizes; all three must be given together.
    #[arg(long, requires_all = ["val", "test"])]
    pub train: Option<usize>,
    #[arg(long, requires_all = ["train", "test"])]
    pub val: Option<usize>,
    #[arg(long, requires_all = ["train", "val"])]
    pub test: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

impl ModelArgs {
    pub fn apply(&self, m: &mut ModelConfig) {
        set(&mut m.d_model, self.d_model);
        set(&mut m.n_layers, self.layers);
        set(&mut m.n_heads, self.heads);
        set(&mut m.d_ff, self.d_ff);
        set(&mut m.max_seq_len, self.max_seq_len);
        set(&mut m.dropout_rate, self.dropout);
        set(&mut m.precision, self.precision);
    }
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Global gradient-norm clip, or `none`.
    #[arg(long)]
    pub clip: Option<Clip>,
    /// Steps between validation passes; 0 means once per epoch.
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

impl OptimArgs {
    pub fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.learning_rate, self.lr);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.beta1, self.beta1);
        set(&mut t.beta2, self.beta2);
        set(&mut t.epsilon, self.epsilon);
        set(&mut t.max_epochs, self.epochs);
        if self.max_steps.is_some() {
            t.max_steps = self.max_steps;
        }
        set(&mut t.grad_clip_norm, self.clip.map(|c| c.0));
        set(&mut t.eval_every, self.eval_every);
        if self.patience.is_some() {
            t.patience = self.patience;
        }
    }
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Length-normalization exponent for beam search.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

impl DecodeArgs {
    pub fn apply(&self, d: &mut DecodeConfig) {
        set(&mut d.beam_width, self.beam_width);
        set(&mut d.length_norm_alpha, self.alpha);
        set(&mut d.top_p, self.top_p);
        set(&mut d.temperature, self.temperature);
        set(&mut d.max_new_tokens, self.max_new_tokens);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train_corpus: Option<PathBuf>,
    #[arg(long)]
    pub val_corpus: Option<PathBuf>,
    /// Streams to include, e.g. `S`, `S,M` or `S+M,V,B`.
    #[arg(long)]
    pub modalities: Option<ModalityMask>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Seeds both initialization and example order.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_freq: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the assembled sequence of one training or validation example and exit.
    #[arg(long, value_name = "QID")]
    pub dump_sequence: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to the modalities stored in the checkpoint.
    #[arg(long)]
    pub modalities: Option<ModalityMask>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the assembled context of one example and exit.
    #[arg(long, value_name = "QID")]
    pub dump_sequence: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub generations: Option<PathBuf>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated strategies, one table row each.
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<Strategy>>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub modalities: Option<ModalityMask>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub train_corpus: Option<PathBuf>,
    #[arg(long)]
    pub val_corpus: Option<PathBuf>,
    /// Corpus the rows are scored on; defaults to the validation corpus.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    /// Row label such as `S+M,V`; repeat for several rows. Defaults to all seven.
    #[arg(long = "row")]
    pub rows: Vec<String>,
    /// Seed shared by every row.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub min_freq: Option<usize>,
    /// Train rows concurrently.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
