//! Sentence-level provenance tracing for distilled reasoning models.
//!
//! A response sampled from a distilled model is split into actions
//! (sentences and isolated special tokens). Each action gets a probability
//! under the teacher, the student and the distilled model, computed as the
//! geometric mean of that model's token probabilities over the action. The
//! differences between those probabilities decide whether the action came
//! from the teacher, from the student, was already shared by all three, or
//! was boosted by distillation. The same machinery labels candidate training
//! responses so that the ones richest in teacher-originated sentences can be
//! selected.
//!
//! The usual flow is [`parse_trace_file`] → [`build_trajectories`] →
//! [`classify_trajectory`] → analysis in [`analytics`] or [`selection`].

pub mod analytics;
pub mod beta;
pub mod error;
pub mod provenance;
pub mod report;
pub mod scoring;
pub mod segment;
pub mod selection;
pub mod synth;
pub mod trace;

pub use analytics::{
    position_stats, position_stats_by_correctness, prob_diff_histogram, rank_candidate_teachers, teacher_gap,
    token_markers, DiffHistogram, GapMetric, NamedHistogram, PositionStats, Split, TeacherRanking, TokenMarker,
};
pub use beta::{histogram_overlap, search_beta, BetaEvaluation, BetaSearchReport};
pub use error::{Error, Result};
pub use provenance::{
    classify_test, classify_train, classify_trajectory, compute_deltas, default_beta_grid, sentence_prob,
    type_proportions, ClassifiedTrajectory, Deltas, Label, LabeledAction, Mode, ThresholdConfig,
};
pub use report::{emit_report, Format, Report};
pub use segment::{align_tokens, default_special_tokens, segment_text, ActionSpan, Alignment};
pub use selection::{export_training_set, score_response, select_responses, SelectionDecision, SelectionMetric};
pub use trace::{
    build_trajectories, join_traces, parse_trace_file, validate_corpus, write_traces, AlignedTrajectory, ModelRole,
    ModelTrace, ScoredAction, TokenScore, TraceKey, ValidationReport,
};
