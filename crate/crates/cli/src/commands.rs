use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use dspt_core::scoring::{read_jobs, score_corpus, Backend, CorpusPaths};
use dspt_core::selection::{group_by_question, SelectionSummary};
use dspt_core::synth::{run_planted_experiment, PlantedConfig};
use dspt_core::trace::ReportError;
use dspt_core::{
    build_trajectories, classify_trajectory, emit_report, export_training_set, parse_trace_file, position_stats,
    position_stats_by_correctness, prob_diff_histogram, rank_candidate_teachers, search_beta, segment_text,
    select_responses, teacher_gap, token_markers, validate_corpus, write_traces, AlignedTrajectory, BetaSearchReport,
    ClassifiedTrajectory, Format, Mode, ModelRole, ModelTrace, NamedHistogram, Report, Split, ThresholdConfig,
};
use serde::Serialize;

use crate::config::{BetaSetting, ConfigFile, Overrides, RunConfig};
use crate::{Cli, Command, ThresholdArgs};

/// A failed command and the exit status it maps to.
pub enum Failure {
    /// Unreadable or invalid input: exit 1.
    Input(anyhow::Error),
    /// Output, network or backend failure: exit 2.
    Io(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Io(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Input(e) | Failure::Io(e) => e,
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn input(self, context: impl FnOnce() -> String) -> Outcome<T>;
    fn io(self, context: impl FnOnce() -> String) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self, context: impl FnOnce() -> String) -> Outcome<T> {
        self.map_err(|e| Failure::Input(e.into().context(context())))
    }

    fn io(self, context: impl FnOnce() -> String) -> Outcome<T> {
        self.map_err(|e| Failure::Io(e.into().context(context())))
    }
}

pub fn run(cli: Cli) -> Outcome {
    let file = cli
        .config
        .as_deref()
        .map(ConfigFile::load)
        .transpose()
        .input(|| "loading configuration".into())?;
    match cli.command {
        Command::Validate(a) => validate(&a.input, a.out.as_deref()),
        Command::Segment(a) => {
            let cfg = resolve(
                file,
                Overrides {
                    special_tokens: a.special_tokens,
                    ..Overrides::default()
                },
            )?;
            segment(&a.input, &cfg)
        }
        Command::Score(a) => {
            let cfg = resolve(file, Overrides::default())?;
            let checkpoint = a.checkpoint.unwrap_or_else(|| suffixed(&a.out, ".checkpoint"));
            let errors = a.errors.unwrap_or_else(|| suffixed(&a.out, ".errors.jsonl"));
            let paths = CorpusPaths {
                traces: a.out,
                checkpoint,
                errors,
            };
            score(&a.jobs, &paths, a.max_failure_rate, &cfg)
        }
        Command::Classify(a) => {
            let cfg = resolve(file, threshold_overrides(&a.thresholds))?;
            classify(&a.input, a.mode, &a.out, a.report.as_deref(), &cfg)
        }
        Command::BetaSearch(a) => {
            let cfg = resolve(
                file,
                Overrides {
                    alpha: a.alpha,
                    bins: a.bins,
                    ..Overrides::default()
                },
            )?;
            let format = a.format.unwrap_or_else(|| format_for(&a.out));
            beta_search(&a.input, &a.out, format, &cfg)
        }
        Command::Stats(a) => {
            let cfg = resolve(
                file,
                Overrides {
                    min_support: a.min_support,
                    interval_tokens: a.interval_tokens,
                    ..Overrides::default()
                },
            )?;
            stats(
                &a.input,
                a.split.into(),
                &a.out,
                a.token_role,
                a.gap_horizon,
                a.format,
                &cfg,
            )
        }
        Command::DiffHist(a) => {
            let cfg = resolve(
                file,
                Overrides {
                    bins: a.bins,
                    ..Overrides::default()
                },
            )?;
            let format = a.format.unwrap_or_else(|| format_for(&a.out));
            diff_hist(&a.inputs, a.role_a, a.role_b, &a.out, format, &cfg)
        }
        Command::TeacherRank(a) => {
            let cfg = resolve(file, threshold_overrides(&a.thresholds))?;
            let format = a.format.unwrap_or_else(|| format_for(&a.out));
            teacher_rank(&a.candidates, &a.out, format, &cfg)
        }
        Command::Select(a) => {
            let cfg = resolve(
                file,
                Overrides {
                    seed: a.seed,
                    ..threshold_overrides(&a.thresholds)
                },
            )?;
            let summary = a.summary.unwrap_or_else(|| with_extension(&a.out, "summary.json"));
            select(a.metric, &a.input, &a.out, &summary, a.decisions.as_deref(), &cfg)
        }
        Command::Synth(a) => {
            let cfg = resolve(
                file,
                Overrides {
                    seed: a.seed,
                    ..threshold_overrides(&a.thresholds)
                },
            )?;
            let planted = PlantedConfig {
                separation: a.separation,
                lambda: a.lambda,
                alpha: cfg.alpha,
                beta: match cfg.beta {
                    BetaSetting::Auto => None,
                    BetaSetting::Fixed(b) => Some(b),
                },
                trajectories: a.trajectories,
                sentences: a.sentences,
                corpus_sentences: a.corpus_sentences,
                seed: cfg.seed,
                ..PlantedConfig::default()
            };
            synth(&planted, &a.out, &a.report, a.planted.as_deref())
        }
    }
}

fn resolve(file: Option<ConfigFile>, flags: Overrides) -> Outcome<RunConfig> {
    RunConfig::resolve(file, &flags).input(|| "resolving configuration".into())
}

fn threshold_overrides(t: &ThresholdArgs) -> Overrides {
    Overrides {
        alpha: t.alpha,
        beta: t.beta,
        ..Overrides::default()
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn format_for(path: &Path) -> Format {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
        _ => Format::Json,
    }
}

fn open(path: &Path) -> Outcome<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .input(|| format!("opening {}", path.display()))
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .io(|| format!("creating {}", path.display()))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Outcome {
    w.flush().io(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Outcome {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(anyhow::Error::from)
        .and_then(|()| w.write_all(b"\n").map_err(Into::into))
        .io(|| format!("writing {}", path.display()))?;
    finish(w, path)
}

fn write_jsonl<'a, T: Serialize + 'a>(items: impl IntoIterator<Item = &'a T>, path: &Path) -> Outcome {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)
            .map_err(anyhow::Error::from)
            .and_then(|()| w.write_all(b"\n").map_err(Into::into))
            .io(|| format!("writing {}", path.display()))?;
    }
    finish(w, path)
}

fn stdout_line(text: &dyn std::fmt::Display) -> Outcome {
    writeln!(std::io::stdout().lock(), "{text}").io(|| "writing to stdout".into())
}

fn emit<R: Report + ?Sized>(report: &R, format: Format, path: &Path) -> Outcome {
    emit_report(report, format, path).io(|| format!("writing {}", path.display()))
}

/// Reads a trace file, refusing it when any line breaks the schema.
fn load_traces(path: &Path) -> Outcome<Vec<ModelTrace>> {
    let parsed = parse_trace_file(open(path)?).input(|| format!("reading {}", path.display()))?;
    for c in &parsed.clamped {
        log::info!("line {}: {} clamped log-probabilities in {}", c.line, c.tokens, c.key);
    }
    if let Some(first) = parsed.errors.first() {
        return Err(Failure::Input(anyhow!(
            "{}: {} invalid lines, first at line {}: {} ({})",
            path.display(),
            parsed.errors.len(),
            first.line.unwrap_or(0),
            first.detail,
            first.kind
        )));
    }
    Ok(parsed.traces)
}

fn load_trajectories(
    path: &Path,
    require_distilled: bool,
    cfg: &RunConfig,
) -> Outcome<(Vec<AlignedTrajectory>, Vec<ReportError>)> {
    let traces = load_traces(path)?;
    let outcome = build_trajectories(&traces, &cfg.special_tokens, require_distilled);
    for s in &outcome.skipped {
        log::warn!("skipping {}: {} ({})", s.key, s.detail, s.kind);
    }
    if outcome.trajectories.is_empty() {
        return Err(Failure::Input(anyhow!("{}: no complete responses", path.display())));
    }
    Ok((outcome.trajectories, outcome.skipped))
}

fn load_classified(path: &Path) -> Outcome<Vec<ClassifiedTrajectory>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.input(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let traj = serde_json::from_str(&line).input(|| format!("{} line {}", path.display(), i + 1))?;
        out.push(traj);
    }
    Ok(out)
}

/// Thresholds to classify with; with `auto`, beta comes from a search over
/// this corpus.
fn thresholds_for(
    corpus: &[AlignedTrajectory],
    cfg: &RunConfig,
) -> Outcome<(ThresholdConfig, Option<BetaSearchReport>)> {
    let base = cfg.thresholds().input(|| "thresholds".into())?;
    match cfg.beta {
        BetaSetting::Fixed(_) => Ok((base, None)),
        BetaSetting::Auto => {
            let report = search_beta(corpus, &base, cfg.bins).input(|| "searching beta".into())?;
            log::info!("searched beta: {}", report.best_beta);
            Ok((base.with_beta(report.best_beta), Some(report)))
        }
    }
}

fn classify_all(
    corpus: &[AlignedTrajectory],
    thresholds: &ThresholdConfig,
    mode: Mode,
) -> Outcome<Vec<ClassifiedTrajectory>> {
    corpus
        .iter()
        .map(|t| classify_trajectory(t, thresholds, mode).input(|| format!("classifying {}", t.key())))
        .collect()
}

fn validate(input: &Path, out: Option<&Path>) -> Outcome {
    let parsed = parse_trace_file(open(input)?).input(|| format!("reading {}", input.display()))?;
    let report = validate_corpus(&parsed.traces).with_parse_errors(&parsed.errors);
    stdout_line(&report)?;
    for e in report.errors.iter().take(20) {
        match e.line {
            Some(line) => eprintln!("line {line}: {} {}: {}", e.key, e.kind, e.detail),
            None => eprintln!("{} {}: {}", e.key, e.kind, e.detail),
        }
    }
    if let Some(out) = out {
        write_json(&report, out)?;
    }
    if report.is_clean() {
        Ok(())
    } else {
        Err(Failure::Input(anyhow!("{} validation errors", report.errors.len())))
    }
}

#[derive(Serialize)]
struct SpanView<'a> {
    index: usize,
    start: usize,
    end: usize,
    is_special: bool,
    text: &'a str,
}

fn segment(input: &Path, cfg: &RunConfig) -> Outcome {
    let text = fs::read_to_string(input).input(|| format!("reading {}", input.display()))?;
    let spans = segment_text(&text, &cfg.special_tokens);
    let view: Vec<SpanView> = spans
        .iter()
        .map(|s| SpanView {
            index: s.index,
            start: s.start,
            end: s.end,
            is_special: s.is_special,
            text: s.text(&text),
        })
        .collect();
    let json = serde_json::to_string_pretty(&view).io(|| "encoding spans".into())?;
    stdout_line(&json)?;
    Ok(())
}

fn score(jobs_path: &Path, paths: &CorpusPaths, max_failure_rate: f64, cfg: &RunConfig) -> Outcome {
    if cfg.backends.is_empty() {
        return Err(Failure::Input(anyhow!(
            "no backends configured; add a \"backends\" map to the --config file"
        )));
    }
    let jobs = read_jobs(open(jobs_path)?).input(|| format!("reading {}", jobs_path.display()))?;
    let mut backends = BTreeMap::new();
    for (role, b) in &cfg.backends {
        let backend = Backend::new(b.clone()).input(|| format!("backend for {role}"))?;
        backends.insert(*role, backend);
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .io(|| "starting runtime".into())?;
    let summary = runtime
        .block_on(score_corpus(&backends, &jobs, paths, max_failure_rate))
        .io(|| "scoring".into())?;
    if summary.failed > 0 {
        log::warn!(
            "{} scoring calls failed; see {}",
            summary.failed,
            paths.errors.display()
        );
    }
    let json = serde_json::to_string(&summary).io(|| "encoding summary".into())?;
    stdout_line(&json)?;
    Ok(())
}

#[derive(Serialize)]
struct ClassifyReport<'a> {
    mode: Mode,
    alpha: f64,
    beta: f64,
    trajectories: usize,
    skipped: &'a [ReportError],
    beta_search: Option<&'a BetaSearchReport>,
}

fn classify(input: &Path, mode: Mode, out: &Path, report: Option<&Path>, cfg: &RunConfig) -> Outcome {
    let (corpus, skipped) = load_trajectories(input, mode == Mode::Test, cfg)?;
    let (thresholds, search) = thresholds_for(&corpus, cfg)?;
    let classified = classify_all(&corpus, &thresholds, mode)?;
    write_jsonl(&classified, out)?;
    if let Some(path) = report {
        write_json(
            &ClassifyReport {
                mode,
                alpha: thresholds.alpha,
                beta: thresholds.beta,
                trajectories: classified.len(),
                skipped: &skipped,
                beta_search: search.as_ref(),
            },
            path,
        )?;
    }
    Ok(())
}

fn beta_search(input: &Path, out: &Path, format: Format, cfg: &RunConfig) -> Outcome {
    let (corpus, _) = load_trajectories(input, false, cfg)?;
    let base = cfg.thresholds().input(|| "thresholds".into())?;
    let report = search_beta(&corpus, &base, cfg.bins).input(|| "searching beta".into())?;
    emit(&report, format, out)
}

fn extension(format: Format) -> &'static str {
    match format {
        Format::Csv => "csv",
        Format::Json => "json",
    }
}

fn stats(
    input: &Path,
    split: Split,
    out: &Path,
    token_role: Option<ModelRole>,
    gap_horizon: usize,
    format: Format,
    cfg: &RunConfig,
) -> Outcome {
    let corpus = load_classified(input)?;
    if corpus.is_empty() {
        return Err(Failure::Input(anyhow!("{}: no classified responses", input.display())));
    }
    let role = token_role.unwrap_or(match corpus[0].mode {
        Mode::Test => ModelRole::Distilled,
        Mode::Train => ModelRole::Teacher,
    });
    fs::create_dir_all(out).io(|| format!("creating {}", out.display()))?;
    let ext = extension(format);
    match split {
        Split::None => {
            let table = position_stats(&corpus, cfg.min_support, role).input(|| "position statistics".into())?;
            emit(&table, format, &out.join(format!("position_stats.{ext}")))?;
            let markers = token_markers(&table, cfg.interval_tokens);
            emit(markers.as_slice(), format, &out.join(format!("markers.{ext}")))?;
        }
        Split::Correctness => {
            let (correct, incorrect) =
                position_stats_by_correctness(&corpus, cfg.min_support, role).input(|| "position statistics".into())?;
            for (name, table) in [("correct", &correct), ("incorrect", &incorrect)] {
                emit(table, format, &out.join(format!("position_stats_{name}.{ext}")))?;
                let markers = token_markers(table, cfg.interval_tokens);
                emit(markers.as_slice(), format, &out.join(format!("markers_{name}.{ext}")))?;
            }
            let gap = teacher_gap(&correct, &incorrect, gap_horizon);
            emit(&gap, Format::Json, &out.join("teacher_gap.json"))?;
        }
    }
    Ok(())
}

fn split_named(arg: &str) -> (Option<&str>, &str) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() => (Some(name), path),
        _ => (None, arg),
    }
}

fn diff_hist(
    inputs: &[String],
    role_a: ModelRole,
    role_b: ModelRole,
    out: &Path,
    format: Format,
    cfg: &RunConfig,
) -> Outcome {
    let needs_distilled = role_a == ModelRole::Distilled || role_b == ModelRole::Distilled;
    let mut named = Vec::with_capacity(inputs.len());
    for arg in inputs {
        let (name, path) = split_named(arg);
        let path = Path::new(path);
        let name = name
            .map(str::to_string)
            .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_else(|| arg.clone());
        let (corpus, _) = load_trajectories(path, needs_distilled, cfg)?;
        named.push(NamedHistogram {
            name,
            histogram: prob_diff_histogram(&corpus, role_a, role_b, cfg.bins),
        });
    }
    if named.len() == 1 {
        emit(&named[0].histogram, format, out)
    } else {
        emit(named.as_slice(), format, out)
    }
}

fn teacher_rank(candidates: &[String], out: &Path, format: Format, cfg: &RunConfig) -> Outcome {
    if candidates.len() < 2 {
        return Err(Failure::Input(anyhow!(
            "teacher-rank needs at least two --candidate NAME=PATH entries"
        )));
    }
    let mut corpora = BTreeMap::new();
    for arg in candidates {
        let (Some(name), path) = split_named(arg) else {
            return Err(Failure::Input(anyhow!("candidate {arg:?} is not NAME=PATH")));
        };
        let (corpus, _) = load_trajectories(Path::new(path), true, cfg)?;
        let (thresholds, _) = thresholds_for(&corpus, cfg)?;
        let classified = classify_all(&corpus, &thresholds, Mode::Test)?;
        if corpora.insert(name.to_string(), classified).is_some() {
            return Err(Failure::Input(anyhow!("candidate {name} given twice")));
        }
    }
    let ranking = rank_candidate_teachers(&corpora).input(|| "ranking candidates".into())?;
    emit(&ranking, format, out)
}

fn select(
    metric: dspt_core::SelectionMetric,
    input: &Path,
    out: &Path,
    summary_path: &Path,
    decisions_path: Option<&Path>,
    cfg: &RunConfig,
) -> Outcome {
    let (corpus, _) = load_trajectories(input, false, cfg)?;
    let (thresholds, _) = thresholds_for(&corpus, cfg)?;
    let classified = classify_all(&corpus, &thresholds, Mode::Train)?;
    let decisions = select_responses(&group_by_question(classified), metric, cfg.seed).input(|| "selecting".into())?;
    let mut w = create(out)?;
    let summary: SelectionSummary =
        export_training_set(&mut w, &decisions, &corpus, metric, thresholds.beta).map_err(|e| match e {
            dspt_core::Error::Io(e) => {
                Failure::Io(anyhow::Error::from(e).context(format!("writing {}", out.display())))
            }
            other => Failure::Input(anyhow::Error::from(other).context("exporting selection")),
        })?;
    finish(w, out)?;
    write_json(&summary, summary_path)?;
    if let Some(path) = decisions_path {
        write_jsonl(&decisions, path)?;
    }
    Ok(())
}

fn synth(cfg: &PlantedConfig, out: &Path, report: &Path, planted_path: Option<&Path>) -> Outcome {
    let run = run_planted_experiment(cfg).input(|| "synthetic experiment".into())?;
    let mut w = create(out)?;
    write_traces(&mut w, &run.traces).io(|| format!("writing {}", out.display()))?;
    finish(w, out)?;
    write_json(&run.report, report)?;
    if let Some(path) = planted_path {
        write_jsonl(&run.planted, path)?;
    }
    Ok(())
}
