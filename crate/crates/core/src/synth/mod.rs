//! Synthetic ground truth: word-level n-gram models stand in for teacher and
//! student, a per-unit mixture stands in for the distilled model, and
//! sampled trajectories carry the known source of every sentence.

mod ngram;
mod planted;

pub use ngram::{
    fit_ngram, score_with, score_with_ngram, unigram_symmetric_kl, word_spans, Mixture, NGramModel, UnitModel, UNK,
};
pub use planted::{
    planted_gap_corpus, rank_planted_teachers, run_planted_experiment, sample_planted, score_planted, Lab, LabelCounts,
    PlantedConfig, PlantedReport, PlantedRun, PlantedTrajectory, Source, DISTILLED_NAME, STUDENT_NAME, TEACHER_NAME,
    UNRELATED_NAME,
};
