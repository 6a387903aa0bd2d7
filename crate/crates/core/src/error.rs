use std::io;

use thiserror::Error;

use crate::trace::ModelRole;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("text mismatch: {0}")]
    TextMismatch(ModelRole),

    #[error("id mismatch: expected {expected}, found {found} ({role})")]
    IdMismatch {
        role: ModelRole,
        expected: String,
        found: String,
    },

    #[error("missing role {role} for {key}")]
    MissingRole { role: ModelRole, key: String },

    #[error("duplicate role {role} for {key}")]
    DuplicateRole { role: ModelRole, key: String },

    #[error("unscorable action")]
    Unscorable,

    #[error("probability out of range (0, 1]: {0}")]
    ProbabilityOutOfRange(f64),

    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),

    #[error("no scorable actions")]
    NoScorableActions,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("trajectory {0} has no distilled-role probabilities; test-mode classification needs all three roles")]
    MissingDistilled(String),

    #[error("no trajectories carry correctness labels")]
    NoCorrectnessLabels,

    #[error("candidate corpora cover different trajectories: {0}")]
    MismatchedCandidates(String),

    #[error("question {0} has no candidate responses")]
    NoCandidates(String),

    #[error("decision references unknown response {question_id}/{response_id}")]
    DanglingResponse { question_id: String, response_id: String },

    #[error("n-gram model: {0}")]
    NGram(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Scoring(#[from] crate::scoring::ScoringError),
}
