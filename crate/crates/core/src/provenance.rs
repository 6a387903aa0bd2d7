//! Sentence probabilities, pairwise deltas and the provenance ladders.
//!
//! Test time (teacher, student and distilled probabilities available), each
//! action is evaluated in the order Shared, Teacher, Student, Boosted.
//! Train time (only teacher and student), the ladder is Common, Teacher,
//! Student. Teacher and Student require a strict excess over beta; equality
//! falls through to Boosted (test) or Common (train).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{AlignedTrajectory, RoleCounts, TraceKey};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.1;

/// Geometric mean of token probabilities, computed in log space.
pub fn sentence_prob(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::Unscorable);
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok(mean.exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    /// student minus distilled
    pub d_sd: f64,
    /// teacher minus distilled
    pub d_td: f64,
    /// teacher minus student
    pub d_ts: f64,
}

fn check_prob(p: f64) -> Result<f64> {
    if p > 0.0 && p <= 1.0 {
        Ok(p)
    } else {
        Err(Error::ProbabilityOutOfRange(p))
    }
}

pub fn compute_deltas(p_t: f64, p_s: f64, p_d: f64) -> Result<Deltas> {
    let (p_t, p_s, p_d) = (check_prob(p_t)?, check_prob(p_s)?, check_prob(p_d)?);
    Ok(Deltas {
        d_sd: p_s - p_d,
        d_td: p_t - p_d,
        d_ts: p_t - p_s,
    })
}

/// The default search grid 0.05, 0.10, ..., 1.00.
pub fn default_beta_grid() -> Vec<f64> {
    (1..=20).map(|i| f64::from(i) * 5.0 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub alpha: f64,
    pub beta: f64,
    pub beta_grid: Vec<f64>,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            beta_grid: default_beta_grid(),
        }
    }
}

impl ThresholdConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let cfg = Self {
            alpha,
            beta,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self { beta, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidThreshold(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidThreshold(format!("beta {} outside (0, 1]", self.beta)));
        }
        if self.beta_grid.is_empty() || self.beta_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidThreshold(
                "beta grid must be nonempty and strictly ascending".into(),
            ));
        }
        if self.beta_grid.iter().any(|b| !(*b > 0.0 && *b <= 1.0)) {
            return Err(Error::InvalidThreshold("beta grid values must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Test,
    Train,
}

impl Mode {
    pub fn labels(self) -> &'static [Label] {
        match self {
            Mode::Test => &[Label::Shared, Label::Teacher, Label::Student, Label::Boosted],
            Mode::Train => &[Label::Common, Label::Teacher, Label::Student],
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Test => "test",
            Mode::Train => "train",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(Mode::Test),
            "train" => Ok(Mode::Train),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Provenance label of one action. `Shared` and `Boosted` occur only in test
/// mode, `Common` only in train mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Shared,
    Teacher,
    Student,
    Boosted,
    Common,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Shared => "shared",
            Label::Teacher => "teacher",
            Label::Student => "student",
            Label::Boosted => "boosted",
            Label::Common => "common",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn classify_test(d: &Deltas, alpha: f64, beta: f64) -> Label {
    if d.d_sd.abs() <= alpha && d.d_td.abs() <= alpha && d.d_ts.abs() <= alpha {
        Label::Shared
    } else if d.d_ts > beta {
        Label::Teacher
    } else if -d.d_ts > beta {
        Label::Student
    } else {
        Label::Boosted
    }
}

pub fn classify_train(d_ts: f64, beta: f64) -> Label {
    if d_ts.abs() <= beta {
        Label::Common
    } else if d_ts > beta {
        Label::Teacher
    } else {
        Label::Student
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledAction {
    pub index: usize,
    pub label: Label,
    pub p_t: f64,
    pub p_s: f64,
    pub p_d: Option<f64>,
    /// Aligned token counts per role.
    #[serde(default)]
    pub tokens: RoleCounts,
}

/// One classified response; also the line format of classified output files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedTrajectory {
    pub question_id: String,
    pub response_id: String,
    pub mode: Mode,
    pub alpha: f64,
    pub beta: f64,
    pub labels: Vec<LabeledAction>,
    #[serde(default)]
    pub correct: Option<bool>,
    /// Total action count including unscorable actions.
    #[serde(default)]
    pub actions: usize,
    #[serde(default)]
    pub unscorable: usize,
}

impl ClassifiedTrajectory {
    pub fn key(&self) -> TraceKey {
        TraceKey {
            question_id: self.question_id.clone(),
            response_id: self.response_id.clone(),
        }
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| l.label == label).count()
    }
}

/// Labels every scorable action of a trajectory. Train mode consults only
/// teacher and student probabilities.
pub fn classify_trajectory(
    traj: &AlignedTrajectory,
    cfg: &ThresholdConfig,
    mode: Mode,
) -> Result<ClassifiedTrajectory> {
    let mut labels = Vec::with_capacity(traj.actions.len());
    for (action, probs) in traj.scorable() {
        let label = match mode {
            Mode::Train => classify_train(probs.teacher - probs.student, cfg.beta),
            Mode::Test => {
                let p_d = probs
                    .distilled
                    .ok_or_else(|| Error::MissingDistilled(traj.key().to_string()))?;
                classify_test(&compute_deltas(probs.teacher, probs.student, p_d)?, cfg.alpha, cfg.beta)
            }
        };
        labels.push(LabeledAction {
            index: action.index,
            label,
            p_t: probs.teacher,
            p_s: probs.student,
            p_d: probs.distilled,
            tokens: action.token_counts,
        });
    }
    Ok(ClassifiedTrajectory {
        question_id: traj.question_id.clone(),
        response_id: traj.response_id.clone(),
        mode,
        alpha: cfg.alpha,
        beta: cfg.beta,
        labels,
        correct: traj.correct,
        actions: traj.actions.len(),
        unscorable: traj.unscorable_count(),
    })
}

/// Label fractions over the scorable actions of one trajectory, keyed by
/// every label of the trajectory's mode.
pub fn type_proportions(traj: &ClassifiedTrajectory) -> Result<BTreeMap<Label, f64>> {
    if traj.labels.is_empty() {
        return Err(Error::NoScorableActions);
    }
    let n = traj.labels.len() as f64;
    Ok(traj
        .mode
        .labels()
        .iter()
        .map(|&label| (label, traj.count(label) as f64 / n))
        .collect())
}
