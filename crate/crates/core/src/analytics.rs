//! Corpus-level analyses over classified trajectories.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provenance::{type_proportions, ClassifiedTrajectory, Label, Mode};
use crate::trace::{AlignedTrajectory, ModelRole, TraceKey};

pub const DEFAULT_MIN_SUPPORT: usize = 10;
pub const DEFAULT_INTERVAL_TOKENS: usize = 4096;
pub const DEFAULT_GAP_HORIZON: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    None,
    Correctness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub position: usize,
    pub support: usize,
    pub low_support: bool,
    pub proportions: BTreeMap<Label, f64>,
    pub mean_tokens: f64,
    pub cum_mean_tokens: f64,
}

impl PositionRow {
    pub fn proportion(&self, label: Label) -> f64 {
        self.proportions.get(&label).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionStats {
    pub mode: Mode,
    pub min_support: usize,
    pub token_role: ModelRole,
    pub rows: Vec<PositionRow>,
}

impl PositionStats {
    pub fn row(&self, position: usize) -> Option<&PositionRow> {
        position.checked_sub(1).and_then(|i| self.rows.get(i))
    }
}

fn corpus_mode<'a, I>(corpus: I) -> Result<Option<Mode>>
where
    I: IntoIterator<Item = &'a ClassifiedTrajectory>,
{
    let mut mode = None;
    for t in corpus {
        match mode {
            None => mode = Some(t.mode),
            Some(m) if m != t.mode => return Err(Error::Config("corpus mixes test and train classifications".into())),
            _ => {}
        }
    }
    Ok(mode)
}

/// Per-position label proportions over every trajectory that has a scorable
/// action at that position. Positions run from 1 to the largest action index.
pub fn position_stats<'a, I>(corpus: I, min_support: usize, token_role: ModelRole) -> Result<PositionStats>
where
    I: IntoIterator<Item = &'a ClassifiedTrajectory> + Clone,
{
    let mode = corpus_mode(corpus.clone())?.unwrap_or(Mode::Test);
    let mut counts: Vec<BTreeMap<Label, usize>> = Vec::new();
    let mut tokens: Vec<usize> = Vec::new();
    for traj in corpus {
        for l in &traj.labels {
            if counts.len() < l.index {
                counts.resize_with(l.index, BTreeMap::new);
                tokens.resize(l.index, 0);
            }
            *counts[l.index - 1].entry(l.label).or_default() += 1;
            tokens[l.index - 1] += l.tokens.get(token_role);
        }
    }
    let mut cumulative = 0.0;
    let rows = counts
        .into_iter()
        .zip(tokens)
        .enumerate()
        .map(|(i, (c, tok))| {
            let support: usize = c.values().sum();
            let proportions = mode
                .labels()
                .iter()
                .map(|label| {
                    let n = c.get(label).copied().unwrap_or(0);
                    (*label, if support > 0 { n as f64 / support as f64 } else { 0.0 })
                })
                .collect();
            let mean_tokens = if support > 0 { tok as f64 / support as f64 } else { 0.0 };
            cumulative += mean_tokens;
            PositionRow {
                position: i + 1,
                support,
                low_support: support < min_support,
                proportions,
                mean_tokens,
                cum_mean_tokens: cumulative,
            }
        })
        .collect();
    Ok(PositionStats {
        mode,
        min_support,
        token_role,
        rows,
    })
}

/// Separate tables for correct and incorrect trajectories; unlabeled
/// trajectories are left out of both.
pub fn position_stats_by_correctness(
    corpus: &[ClassifiedTrajectory],
    min_support: usize,
    token_role: ModelRole,
) -> Result<(PositionStats, PositionStats)> {
    if !corpus.iter().any(|t| t.correct.is_some()) {
        return Err(Error::NoCorrectnessLabels);
    }
    let mode = corpus_mode(corpus)?;
    let pick = |flag: bool| {
        let part: Vec<&ClassifiedTrajectory> = corpus.iter().filter(|t| t.correct == Some(flag)).collect();
        position_stats(part.iter().copied(), min_support, token_role).map(|mut s| {
            s.mode = mode.unwrap_or(s.mode);
            s
        })
    };
    Ok((pick(true)?, pick(false)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMarker {
    pub threshold: usize,
    pub position: usize,
}

/// For thresholds interval, 2*interval, ... up to the final cumulative mean
/// token count, the first position whose cumulative mean reaches the
/// threshold. When one position crosses several thresholds only the first is
/// kept, so positions are strictly increasing.
pub fn token_markers(stats: &PositionStats, interval_tokens: usize) -> Vec<TokenMarker> {
    let mut markers: Vec<TokenMarker> = Vec::new();
    if interval_tokens == 0 {
        return markers;
    }
    let max = stats.rows.last().map_or(0.0, |r| r.cum_mean_tokens);
    let mut threshold = interval_tokens;
    while threshold as f64 <= max {
        if let Some(row) = stats.rows.iter().find(|r| r.cum_mean_tokens >= threshold as f64) {
            if markers.last().is_none_or(|m| m.position < row.position) {
                markers.push(TokenMarker {
                    threshold,
                    position: row.position,
                });
            }
        }
        threshold += interval_tokens;
    }
    markers
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffHistogram {
    pub role_a: ModelRole,
    pub role_b: ModelRole,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub bins: Vec<HistogramBin>,
}

impl DiffHistogram {
    /// Normalized histogram of differences over [-1, 1].
    pub fn from_diffs(role_a: ModelRole, role_b: ModelRole, diffs: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let width = 2.0 / bins as f64;
        let mut counts = vec![0usize; bins];
        for &d in diffs {
            let x = (d.clamp(-1.0, 1.0) + 1.0) / 2.0;
            counts[((x * bins as f64).floor() as usize).min(bins - 1)] += 1;
        }
        let n = diffs.len();
        let (mean, std) = if n == 0 {
            (0.0, 0.0)
        } else {
            let mean = diffs.iter().sum::<f64>() / n as f64;
            let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
            (mean, var.sqrt())
        };
        let bins = counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| HistogramBin {
                lo: -1.0 + i as f64 * width,
                hi: if i + 1 == bins {
                    1.0
                } else {
                    -1.0 + (i + 1) as f64 * width
                },
                mass: if n == 0 { 0.0 } else { c as f64 / n as f64 },
            })
            .collect();
        Self {
            role_a,
            role_b,
            count: n,
            mean,
            std,
            bins,
        }
    }
}

/// Distribution of p_a - p_b over every scorable action where both roles
/// were scored.
pub fn prob_diff_histogram(
    corpus: &[AlignedTrajectory],
    role_a: ModelRole,
    role_b: ModelRole,
    bins: usize,
) -> DiffHistogram {
    let diffs: Vec<f64> = corpus
        .iter()
        .flat_map(|t| t.scorable())
        .filter_map(|(_, p)| Some(p.get(role_a)? - p.get(role_b)?))
        .collect();
    DiffHistogram::from_diffs(role_a, role_b, &diffs, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedHistogram {
    pub name: String,
    #[serde(flatten)]
    pub histogram: DiffHistogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapMetric {
    pub k: usize,
    pub value: f64,
}

/// Cumulative Teacher-proportion difference, correct minus incorrect, over
/// positions 1..=k. Missing positions contribute zero.
pub fn teacher_gap(correct: &PositionStats, incorrect: &PositionStats, k: usize) -> GapMetric {
    let teacher = |s: &PositionStats, j: usize| s.row(j).map_or(0.0, |r| r.proportion(Label::Teacher));
    let value = (1..=k).map(|j| teacher(correct, j) - teacher(incorrect, j)).sum();
    GapMetric { k, value }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub name: String,
    pub mean_teacher: f64,
    pub mean_student: f64,
    pub trajectories: usize,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRanking {
    pub ranking: Vec<CandidateScore>,
}

/// Ranks candidate teachers by mean per-trajectory Teacher proportion,
/// descending; ties go to the lexicographically smaller name.
pub fn rank_candidate_teachers(corpora: &BTreeMap<String, Vec<ClassifiedTrajectory>>) -> Result<TeacherRanking> {
    let mut reference: Option<(&str, BTreeSet<TraceKey>)> = None;
    let mut ranking = Vec::with_capacity(corpora.len());
    for (name, corpus) in corpora {
        let keys: BTreeSet<TraceKey> = corpus.iter().map(ClassifiedTrajectory::key).collect();
        match &reference {
            None => reference = Some((name, keys)),
            Some((first, expected)) if *expected != keys => {
                return Err(Error::MismatchedCandidates(format!("{first} vs {name}")));
            }
            _ => {}
        }
        let props: Vec<BTreeMap<Label, f64>> = corpus.iter().filter_map(|t| type_proportions(t).ok()).collect();
        let avg = |label: Label| {
            if props.is_empty() {
                0.0
            } else {
                props.iter().map(|p| p.get(&label).copied().unwrap_or(0.0)).sum::<f64>() / props.len() as f64
            }
        };
        ranking.push(CandidateScore {
            name: name.clone(),
            mean_teacher: avg(Label::Teacher),
            mean_student: avg(Label::Student),
            trajectories: props.len(),
            beta: corpus.first().map(|t| t.beta),
        });
    }
    ranking.sort_by(|a, b| {
        b.mean_teacher
            .total_cmp(&a.mean_teacher)
            .then_with(|| a.name.cmp(&b.name))
    });
    Ok(TeacherRanking { ranking })
}
