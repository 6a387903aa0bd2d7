//! Teacher-guided training-data selection: one response per question, chosen
//! by a score over its train-mode labels.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provenance::{ClassifiedTrajectory, Label};
use crate::trace::AlignedTrajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMetric {
    MaxTeacherCount,
    MinTeacherCount,
    Longest,
    RelativeProportion,
    Random,
}

impl SelectionMetric {
    pub const ALL: [SelectionMetric; 5] = [
        SelectionMetric::MaxTeacherCount,
        SelectionMetric::MinTeacherCount,
        SelectionMetric::Longest,
        SelectionMetric::RelativeProportion,
        SelectionMetric::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMetric::MaxTeacherCount => "max-teacher-count",
            SelectionMetric::MinTeacherCount => "min-teacher-count",
            SelectionMetric::Longest => "longest",
            SelectionMetric::RelativeProportion => "relative-proportion",
            SelectionMetric::Random => "random",
        }
    }

    fn minimizes(self) -> bool {
        self == SelectionMetric::MinTeacherCount
    }
}

impl fmt::Display for SelectionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown selection metric {s:?}")))
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hash of "seed|question_id|response_id" mapped to [0, 1).
pub fn random_score(seed: u64, question_id: &str, response_id: &str) -> f64 {
    let h = fnv1a64(format!("{seed}|{question_id}|{response_id}").as_bytes());
    (h >> 11) as f64 / (1u64 << 53) as f64
}

pub fn score_response(traj: &ClassifiedTrajectory, metric: SelectionMetric, seed: u64) -> f64 {
    let teacher = traj.count(Label::Teacher) as f64;
    match metric {
        SelectionMetric::MaxTeacherCount | SelectionMetric::MinTeacherCount => teacher,
        SelectionMetric::Longest => traj.labels.len() as f64,
        SelectionMetric::RelativeProportion => {
            if traj.labels.is_empty() {
                0.0
            } else {
                teacher / traj.labels.len() as f64
            }
        }
        SelectionMetric::Random => random_score(seed, &traj.question_id, &traj.response_id),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub question_id: String,
    pub response_id: String,
    pub score: f64,
    pub teacher_count: usize,
    pub candidate_scores: BTreeMap<String, f64>,
}

fn decide(
    question_id: &str,
    candidates: &[ClassifiedTrajectory],
    metric: SelectionMetric,
    seed: u64,
) -> Result<SelectionDecision> {
    let mut best: Option<(&ClassifiedTrajectory, f64)> = None;
    let mut scores = BTreeMap::new();
    for c in candidates {
        let score = score_response(c, metric, seed);
        scores.insert(c.response_id.clone(), score);
        let better = match best {
            None => true,
            Some((b, s)) => {
                let strictly = if metric.minimizes() { score < s } else { score > s };
                strictly || (score == s && c.response_id < b.response_id)
            }
        };
        if better {
            best = Some((c, score));
        }
    }
    let (chosen, score) = best.ok_or_else(|| Error::NoCandidates(question_id.to_string()))?;
    Ok(SelectionDecision {
        question_id: question_id.to_string(),
        response_id: chosen.response_id.clone(),
        score,
        teacher_count: chosen.count(Label::Teacher),
        candidate_scores: scores,
    })
}

/// Picks one response per question: the highest score (lowest for
/// `MinTeacherCount`), ties to the smallest response_id.
pub fn select_responses(
    candidates: &BTreeMap<String, Vec<ClassifiedTrajectory>>,
    metric: SelectionMetric,
    seed: u64,
) -> Result<Vec<SelectionDecision>> {
    let questions: Vec<(&String, &Vec<ClassifiedTrajectory>)> = candidates.iter().collect();
    questions
        .par_iter()
        .map(|(q, cands)| decide(q, cands, metric, seed))
        .collect()
}

/// Groups classified responses by question.
pub fn group_by_question<I>(responses: I) -> BTreeMap<String, Vec<ClassifiedTrajectory>>
where
    I: IntoIterator<Item = ClassifiedTrajectory>,
{
    let mut out: BTreeMap<String, Vec<ClassifiedTrajectory>> = BTreeMap::new();
    for r in responses {
        out.entry(r.question_id.clone()).or_default().push(r);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub questions: usize,
    pub metric: SelectionMetric,
    pub beta: f64,
    pub mean_teacher_count: f64,
}

#[derive(Serialize)]
struct ExportLine<'a> {
    question_id: &'a str,
    response_id: &'a str,
    text: &'a str,
}

/// Writes one `{"question_id","response_id","text"}` line per decision,
/// ordered by question_id, and returns the summary.
pub fn export_training_set<W: Write>(
    mut writer: W,
    decisions: &[SelectionDecision],
    corpus: &[AlignedTrajectory],
    metric: SelectionMetric,
    beta: f64,
) -> Result<SelectionSummary> {
    let texts: HashMap<(&str, &str), &str> = corpus
        .iter()
        .map(|t| ((t.question_id.as_str(), t.response_id.as_str()), t.text.as_str()))
        .collect();
    let mut ordered: Vec<&SelectionDecision> = decisions.iter().collect();
    ordered.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    let mut lines = Vec::with_capacity(ordered.len());
    for d in &ordered {
        let text = texts
            .get(&(d.question_id.as_str(), d.response_id.as_str()))
            .ok_or_else(|| Error::DanglingResponse {
                question_id: d.question_id.clone(),
                response_id: d.response_id.clone(),
            })?;
        lines.push(ExportLine {
            question_id: &d.question_id,
            response_id: &d.response_id,
            text,
        });
    }
    for line in &lines {
        serde_json::to_writer(&mut writer, line)?;
        writer.write_all(b"\n")?;
    }
    let mean_teacher_count = if ordered.is_empty() {
        0.0
    } else {
        ordered.iter().map(|d| d.teacher_count as f64).sum::<f64>() / ordered.len() as f64
    };
    Ok(SelectionSummary {
        questions: ordered.len(),
        metric,
        beta,
        mean_teacher_count,
    })
}
