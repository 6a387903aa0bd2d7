use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tokio::task::JoinSet;

use super::client::Backend;
use super::ScoringError;
use crate::error::{Error, Result};
use crate::trace::{write_traces, ModelRole};

pub const DEFAULT_MAX_FAILURE_RATE: f64 = 0.2;

/// One response to score; also the line format of job files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreJob {
    pub question_id: String,
    pub response_id: String,
    #[serde(default)]
    pub prompt: String,
    pub response_text: String,
    #[serde(default)]
    pub correct: Option<bool>,
    #[serde(default)]
    pub domain_tag: Option<String>,
}

pub fn read_jobs<R: BufRead>(reader: R) -> Result<Vec<ScoreJob>> {
    let mut jobs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let job: ScoreJob =
            serde_json::from_str(&line).map_err(|e| Error::Config(format!("job line {}: {e}", i + 1)))?;
        jobs.push(job);
    }
    Ok(jobs)
}

#[derive(Debug, Clone)]
pub struct CorpusPaths {
    /// Trace file; appended to across runs.
    pub traces: PathBuf,
    /// Completed (question_id, response_id, model_role) keys; appended.
    pub checkpoint: PathBuf,
    /// Failures of the current run; truncated at start.
    pub errors: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
struct CheckpointKey {
    question_id: String,
    response_id: String,
    model_role: ModelRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub key: String,
    pub role: ModelRole,
    pub status: Option<u16>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    /// (job, role) pairs scored in this run.
    pub scored: usize,
    /// Pairs skipped because an earlier run completed them.
    pub skipped: usize,
    pub failed: usize,
    /// HTTP requests sent in this run, retries included.
    pub requests: u64,
}

fn read_done(paths: &CorpusPaths) -> Result<HashSet<CheckpointKey>> {
    let mut done = HashSet::new();
    // a key in either file counts as done
    for path in [&paths.checkpoint, &paths.traces] {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
            Err(e) => return Err(e.into()),
        };
        for line in BufReader::new(file).lines() {
            let line = line?;
            if let Ok(key) = serde_json::from_str::<CheckpointKey>(&line) {
                done.insert(key);
            }
        }
    }
    Ok(done)
}

fn append(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?))
}

/// Scores every job under every configured role. Traces are written by this
/// task alone as results arrive; each success is checkpointed so a rerun only
/// retries what is missing. Fails once failures exceed `max_failure_rate` of
/// the pairs scheduled in this run.
pub async fn score_corpus(
    backends: &BTreeMap<ModelRole, Arc<Backend>>,
    jobs: &[ScoreJob],
    paths: &CorpusPaths,
    max_failure_rate: f64,
) -> Result<CorpusSummary> {
    let done = read_done(paths)?;
    let mut seen = HashSet::new();
    let mut summary = CorpusSummary::default();
    let mut pending = Vec::new();
    for job in jobs {
        if !seen.insert((job.question_id.as_str(), job.response_id.as_str())) {
            log::warn!("duplicate job {}/{} ignored", job.question_id, job.response_id);
            continue;
        }
        for role in backends.keys() {
            let key = CheckpointKey {
                question_id: job.question_id.clone(),
                response_id: job.response_id.clone(),
                model_role: *role,
            };
            if done.contains(&key) {
                summary.skipped += 1;
            } else {
                pending.push((*role, job.clone()));
            }
        }
    }

    let requests_before: u64 = backends.values().map(|b| b.requests_sent()).sum();
    let total = pending.len();
    let mut traces_out = append(&paths.traces)?;
    let mut checkpoint_out = append(&paths.checkpoint)?;
    let mut errors_out = BufWriter::new(File::create(&paths.errors)?);

    let mut tasks = JoinSet::new();
    for (role, job) in pending {
        let backend = Arc::clone(&backends[&role]);
        tasks.spawn(async move {
            let result = backend.score_text(role, &job).await;
            (role, job, result)
        });
    }

    let mut abort: Option<ScoringError> = None;
    while let Some(joined) = tasks.join_next().await {
        let (role, job, result) = match joined {
            Ok(r) => r,
            Err(e) if e.is_cancelled() => continue,
            Err(e) => return Err(Error::Io(std::io::Error::other(e))),
        };
        match result {
            Ok(scored) => {
                write_traces(&mut traces_out, [&scored.trace])?;
                traces_out.flush()?;
                let key = CheckpointKey {
                    question_id: job.question_id,
                    response_id: job.response_id,
                    model_role: role,
                };
                serde_json::to_writer(&mut checkpoint_out, &key)?;
                checkpoint_out.write_all(b"\n")?;
                checkpoint_out.flush()?;
                summary.scored += 1;
            }
            Err(e) => {
                log::warn!("{}/{} {role}: {e}", job.question_id, job.response_id);
                let record = ErrorRecord {
                    key: format!("{}/{}", job.question_id, job.response_id),
                    role,
                    status: e.status(),
                    detail: e.to_string(),
                };
                serde_json::to_writer(&mut errors_out, &record)?;
                errors_out.write_all(b"\n")?;
                errors_out.flush()?;
                summary.failed += 1;
                if abort.is_none() && summary.failed as f64 > max_failure_rate * total as f64 {
                    abort = Some(ScoringError::FailureRate {
                        failed: summary.failed,
                        total,
                        rate: max_failure_rate,
                    });
                    tasks.abort_all();
                }
            }
        }
    }
    summary.requests = backends.values().map(|b| b.requests_sent()).sum::<u64>() - requests_before;
    match abort {
        Some(e) => Err(e.into()),
        None => Ok(summary),
    }
}
