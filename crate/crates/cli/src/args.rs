use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "civic-evidence", version, about = "Evidence-level classification of cancer variant abstracts")]
pub struct Cli {
    /// TOML run configuration. Flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fetch (or load) evidence records, filter, deduplicate and split.
    Ingest(IngestArgs),
    /// Subword vocabulary.
    #[command(subcommand)]
    Tokenizer(TokenizerCommand),
    /// Tf-idf plus one-vs-rest logistic regression.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Masked-LM pretraining of an encoder.
    Pretrain(PretrainArgs),
    /// Tile the positional table to a longer context.
    ExtendContext(ExtendArgs),
    /// Multi-label fine-tuning over one or more seeds.
    Finetune(FinetuneArgs),
    /// Learning-rate by batch-size search on validation loss.
    GridSearch(GridSearchArgs),
    /// Per-class thresholds from validation predictions.
    Calibrate(CalibrateArgs),
    /// Thresholded metrics for a prediction file.
    Evaluate(EvaluateArgs),
    /// Integrated-gradients token attributions.
    Explain(ExplainArgs),
    /// N-shot prompting of a chat model on the reduced test set.
    Fewshot(FewshotArgs),
    /// Combine metrics and compare the errors of several models.
    Report(ReportArgs),
    /// Synthetic fixtures.
    #[command(hide = true)]
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// GraphQL endpoint.
    #[arg(long, default_value = "https://civicdb.org/api/graphql")]
    pub endpoint: String,
    /// JSON array of raw records used instead of the network.
    #[arg(long)]
    pub from_fixture: Option<PathBuf>,
    /// Split JSONL.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub page_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum TokenizerCommand {
    Train(TokenizerTrainArgs),
}

#[derive(Debug, Args)]
pub struct TokenizerTrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Target vocabulary size, special tokens included.
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Plain text (one document per line) or the training part of a split.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct CorpusArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum BaselineCommand {
    Train(BaselineTrainArgs),
    Eval(BaselineEvalArgs),
}

#[derive(Debug, Args)]
pub struct BaselineTrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Inverse regularization strength.
    #[arg(long)]
    pub c: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BaselineEvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Keep only documents with at least this many tokens.
    #[arg(long)]
    pub min_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtendArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub factor: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelSource {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Pretrained checkpoint; a fresh model from the config otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelSource,
    /// Pick learning rate and batch size by grid search first.
    #[arg(long, conflicts_with_all = ["lr", "batch"])]
    pub grid: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridSearchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long, value_delimiter = ',')]
    pub lrs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub batches: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seeds_per_cell: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Validation prediction JSONL.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Threshold JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction JSONL with scores and gold labels.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Threshold JSON; 0.5 for every class when absent.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Row label in the reports.
    #[arg(long, default_value = "model")]
    pub name: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BaselineChoice {
    Zero,
    Pad,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitChoice {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Target level; every level when absent.
    #[arg(long = "class")]
    pub class: Option<char>,
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineChoice>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
    /// Explain at most this many items carrying a target level.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Entries per class in the top-token table.
    #[arg(long)]
    pub top: Option<usize>,
    /// Attribution JSONL; the table goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClientChoice {
    Live,
    Mock,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "mock")]
    pub client: ClientChoice,
    /// Fixed reply of the mock client; it answers with the gold labels otherwise.
    #[arg(long)]
    pub mock_response: Option<String>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub per_level: Option<usize>,
    #[arg(long)]
    pub token_budget: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Thresholded prediction files of two or more models.
    #[arg(long, num_args = 1..)]
    pub compare: Vec<PathBuf>,
    /// Metrics JSON files to tabulate together.
    #[arg(long, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SynthKind {
    /// Keyword-coded split JSONL.
    Keyword,
    /// Raw records JSON for `ingest --from-fixture`.
    Raw,
    /// Patterned plain-text corpus.
    Pattern,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}
