//! Command-line surface. All randomness in any subcommand flows from its
//! `--seed` flag; hyperparameters can come from a flat TOML config file with
//! explicit flags taking precedence.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "mnemcap",
    version,
    about = "Contextual captioning pipeline: ingest, annotate, tokenize, mask, split, train, generate, evaluate"
)]
pub struct Cli {
    /// Print the text-filter character allowlist and exit.
    #[arg(long, global = true)]
    pub print_allowlist: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a JSONL corpus, filter short/dirty text, de-duplicate, and write
    /// the canonical corpus format.
    Ingest(IngestArgs),
    /// Word-count and entity statistics for a corpus.
    Stats(StatsArgs),
    /// Tag entity spans with a gazetteer and write an annotation sidecar.
    Annotate(AnnotateArgs),
    /// BPE vocabulary operations.
    #[command(subcommand)]
    Tokenize(TokenizeCmd),
    /// Corrupt captions under a masking strategy.
    Mask(MaskArgs),
    /// Jaccard overlap scoring and Easy/Hard assignment.
    Split(SplitArgs),
    /// Pre-train on masked captions.
    Pretrain(TrainArgs),
    /// Fine-tune on clean captions (optionally from a pre-trained checkpoint).
    Finetune(TrainArgs),
    /// Generate captions for a corpus from a checkpoint.
    Generate(GenerateArgs),
    /// Evaluate generated captions.
    Eval(EvalArgs),
    /// Generate a synthetic corpus with exact entity annotations.
    Synth(SynthArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// The full masking-strategy comparison: pretrain, finetune, generate,
    /// and evaluate per strategy and seed, reporting medians.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Source schema: "identity" (the toolkit's own keys) or "wit".
    #[arg(long, default_value = "identity")]
    pub field_map: String,
    #[arg(long, default_value_t = mnemcap_core::corpus::DEFAULT_MIN_CAPTION_WORDS)]
    pub min_caption_words: usize,
    #[arg(long, default_value_t = mnemcap_core::corpus::DEFAULT_MIN_SECTION_WORDS)]
    pub min_section_words: usize,
    /// Skip de-duplication.
    #[arg(long)]
    pub no_dedup: bool,
    /// Where to write the per-line reject report.
    #[arg(long)]
    pub rejects: Option<PathBuf>,
    /// Source tag assumed when the input has no source field.
    #[arg(long, default_value = "wiki")]
    pub source: String,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub gazetteer: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum TokenizeCmd {
    /// Learn BPE merges from corpus text.
    Train(TokenizeTrainArgs),
    /// Encode text (or corpus captions) to token ids.
    Encode(TokenizeEncodeArgs),
}

#[derive(Debug, Args)]
pub struct TokenizeTrainArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TokenizeEncodeArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Literal text to encode; mutually exclusive with --input.
    #[arg(long)]
    pub text: Option<String>,
    /// Corpus whose captions are encoded, one JSON line per sample.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// mnem-decoder | mnem-sentinel | mlm | full
    #[arg(long)]
    pub strategy: String,
    #[arg(long, default_value_t = mnemcap_core::mask::DEFAULT_MNEM_P)]
    pub p: f64,
    #[arg(long, default_value_t = mnemcap_core::mask::DEFAULT_MLM_RATIO)]
    pub ratio: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// wiki | section | description
    #[arg(long, default_value = "wiki")]
    pub context: String,
    #[arg(long, default_value_t = mnemcap_core::split::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct ModelFlags {
    /// decoder-prefix | encoder-decoder
    #[arg(long)]
    pub arch: Option<String>,
    /// dynamic-conv | self-attn
    #[arg(long)]
    pub block: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_context_tokens: Option<usize>,
}

#[derive(Debug, Args, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Annotation sidecar; required for entity-masking strategies.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Masking strategy for pre-training (ignored by finetune).
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long, default_value_t = mnemcap_core::mask::DEFAULT_MNEM_P)]
    pub p: f64,
    #[arg(long, default_value_t = mnemcap_core::mask::DEFAULT_MLM_RATIO)]
    pub ratio: f64,
    /// Initial checkpoint (finetune from a pre-trained model).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Flat TOML file of hyperparameters; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Beam width; 1 = greedy.
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    /// Generate as if no image were available.
    #[arg(long)]
    pub no_image: bool,
    #[arg(long, default_value_t = 48)]
    pub max_context_tokens: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub gazetteer: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Add-1 smoothing on higher-order BLEU counts.
    #[arg(long)]
    pub smooth: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file matching the synthesis config; flags override.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub easy_fraction: Option<f64>,
    /// Print analytic expectations instead of generating.
    #[arg(long)]
    pub describe: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// decoder-prefix | encoder-decoder | all
    #[arg(long, default_value = "all")]
    pub arch: String,
    /// dynamic-conv | self-attn | all
    #[arg(long, default_value = "all")]
    pub block: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file matching the experiment config; flags override.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated: none,mlm,full,mnem-decoder
    #[arg(long)]
    pub strategies: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub train_samples: Option<usize>,
    #[arg(long)]
    pub test_samples: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
}
