//! `dspt`: file-to-file stages for provenance tracing of distilled models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use dspt_core::{Mode, ModelRole, SelectionMetric, Split};

use crate::config::BetaSetting;

/// Exit status for malformed command lines.
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(
    name = "dspt",
    version,
    about = "Sentence-level provenance tracing for distilled reasoning models"
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a trace file against the schema and the cross-role rules.
    Validate(ValidateArgs),
    /// Print the action spans of a text file as JSON.
    Segment(SegmentArgs),
    /// Score response jobs against the configured backends.
    Score(ScoreArgs),
    /// Label every action of every complete response.
    Classify(ClassifyArgs),
    /// Search the beta grid for the threshold that best separates labels.
    BetaSearch(BetaSearchArgs),
    /// Per-position label proportions and token markers.
    Stats(StatsArgs),
    /// Histogram of sentence-probability differences between two roles.
    DiffHist(DiffHistArgs),
    /// Rank candidate teachers by their mean Teacher proportion.
    TeacherRank(TeacherRankArgs),
    /// Pick one training response per question.
    Select(SelectArgs),
    /// Generate a synthetic corpus with planted provenance.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long = "in", value_name = "TRACES")]
    input: PathBuf,
    /// Write the full validation report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long = "in", value_name = "TEXT")]
    input: PathBuf,
    /// Comma-separated special tokens, replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    special_tokens: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// items.jsonl with question_id, response_id, prompt and response_text.
    #[arg(long)]
    jobs: PathBuf,
    /// Trace file, appended to.
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to `<out>.errors.jsonl`.
    #[arg(long)]
    errors: Option<PathBuf>,
    #[arg(long, default_value_t = dspt_core::scoring::DEFAULT_MAX_FAILURE_RATE)]
    max_failure_rate: f64,
}

#[derive(Debug, Args)]
struct ThresholdArgs {
    #[arg(long)]
    alpha: Option<f64>,
    /// A number, or `auto` to search the beta grid.
    #[arg(long)]
    beta: Option<BetaSetting>,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[arg(long = "in", value_name = "TRACES")]
    input: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[arg(long, default_value = "test")]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
    /// Write skipped responses and the beta used as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BetaSearchArgs {
    #[arg(long = "in", value_name = "TRACES")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    /// csv or json; inferred from the output extension when absent.
    #[arg(long)]
    format: Option<dspt_core::Format>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Classified output of `classify`.
    #[arg(long = "in", value_name = "LABELS")]
    input: PathBuf,
    #[arg(long, default_value = "none")]
    split: SplitArg,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    min_support: Option<usize>,
    #[arg(long)]
    interval_tokens: Option<usize>,
    /// Role whose token counts feed the markers; distilled for test-mode
    /// labels and teacher for train-mode labels by default.
    #[arg(long)]
    token_role: Option<ModelRole>,
    #[arg(long, default_value_t = dspt_core::analytics::DEFAULT_GAP_HORIZON)]
    gap_horizon: usize,
    #[arg(long, default_value = "csv")]
    format: dspt_core::Format,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    None,
    Correctness,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::None => Split::None,
            SplitArg::Correctness => Split::Correctness,
        }
    }
}

#[derive(Debug, Args)]
struct DiffHistArgs {
    /// Trace file, optionally named as NAME=PATH; repeat to compare corpora.
    #[arg(long = "in", value_name = "[NAME=]PATH", required = true)]
    inputs: Vec<String>,
    #[arg(long, default_value = "teacher")]
    role_a: ModelRole,
    #[arg(long, default_value = "student")]
    role_b: ModelRole,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    format: Option<dspt_core::Format>,
}

#[derive(Debug, Args)]
struct TeacherRankArgs {
    /// NAME=PATH of a trace file scored with that candidate as teacher.
    #[arg(long = "candidate", value_name = "NAME=PATH", required = true, num_args = 1)]
    candidates: Vec<String>,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    format: Option<dspt_core::Format>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    metric: SelectionMetric,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "in", value_name = "TRACES")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `<out>.summary.json`.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Per-question decisions with every candidate's score.
    #[arg(long)]
    decisions: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 200)]
    trajectories: usize,
    #[arg(long, default_value_t = 20)]
    sentences: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Share of teacher words swapped for student words, in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 2000)]
    corpus_sentences: usize,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Per-sentence planted sources as JSONL.
    #[arg(long)]
    planted: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.code())
        }
    }
}
