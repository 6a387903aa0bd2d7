//! Adaptive beta selection by histogram-overlap minimization.
//!
//! For each candidate beta (ascending), every trajectory is classified in
//! train mode and its Student, Common and Teacher proportions are collected.
//! The objective is overlap(Student, Common) + overlap(Common, Teacher); the
//! first beta reaching the minimum wins. The scan stops after the first beta
//! whose mean Common proportion exceeds its mean Teacher proportion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provenance::{classify_train, Label, ThresholdConfig};
use crate::trace::AlignedTrajectory;

pub const DEFAULT_BINS: usize = 20;

fn bin_masses(sample: &[f64], bins: usize) -> Vec<f64> {
    let mut counts = vec![0usize; bins];
    for &x in sample {
        let x = x.clamp(0.0, 1.0);
        let i = ((x * bins as f64).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = sample.len() as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Sum over bins of the smaller normalized mass, for samples in [0, 1]
/// binned uniformly. Zero when either sample is empty.
pub fn histogram_overlap(a: &[f64], b: &[f64], bins: usize) -> f64 {
    if a.is_empty() || b.is_empty() || bins == 0 {
        return 0.0;
    }
    bin_masses(a, bins)
        .iter()
        .zip(bin_masses(b, bins))
        .map(|(x, y)| x.min(y))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaEvaluation {
    pub beta: f64,
    pub overlap_sc: f64,
    pub overlap_ct: f64,
    pub total_overlap: f64,
    pub mean_common: f64,
    pub mean_teacher: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSearchReport {
    pub best_beta: f64,
    pub per_beta: Vec<BetaEvaluation>,
    pub stopped_early: bool,
    pub bins: usize,
}

/// Per-trajectory Student, Common and Teacher proportions under `beta`.
pub fn train_proportions(gaps: &[Vec<f64>], beta: f64) -> [Vec<f64>; 3] {
    let mut student = Vec::with_capacity(gaps.len());
    let mut common = Vec::with_capacity(gaps.len());
    let mut teacher = Vec::with_capacity(gaps.len());
    for traj in gaps {
        let n = traj.len() as f64;
        let (mut s, mut c, mut t) = (0usize, 0usize, 0usize);
        for &d in traj {
            match classify_train(d, beta) {
                Label::Student => s += 1,
                Label::Teacher => t += 1,
                _ => c += 1,
            }
        }
        student.push(s as f64 / n);
        common.push(c as f64 / n);
        teacher.push(t as f64 / n);
    }
    [student, common, teacher]
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Teacher-minus-student gaps of every scorable action, one vector per
/// trajectory; trajectories without scorable actions are left out.
pub fn teacher_student_gaps(corpus: &[AlignedTrajectory]) -> Vec<Vec<f64>> {
    corpus
        .iter()
        .map(|t| t.scorable().map(|(_, p)| p.teacher - p.student).collect::<Vec<f64>>())
        .filter(|g| !g.is_empty())
        .collect()
}

pub fn evaluate_beta(gaps: &[Vec<f64>], beta: f64, bins: usize) -> BetaEvaluation {
    let [student, common, teacher] = train_proportions(gaps, beta);
    let overlap_sc = histogram_overlap(&student, &common, bins);
    let overlap_ct = histogram_overlap(&common, &teacher, bins);
    BetaEvaluation {
        beta,
        overlap_sc,
        overlap_ct,
        total_overlap: overlap_sc + overlap_ct,
        mean_common: mean(&common),
        mean_teacher: mean(&teacher),
    }
}

pub fn search_beta(corpus: &[AlignedTrajectory], cfg: &ThresholdConfig, bins: usize) -> Result<BetaSearchReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if bins == 0 {
        return Err(Error::Config("histogram bins must be at least 1".into()));
    }
    cfg.validate()?;
    let gaps = teacher_student_gaps(corpus);
    if gaps.is_empty() {
        return Err(Error::NoScorableActions);
    }
    let mut per_beta = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    let mut stopped_early = false;
    for &beta in &cfg.beta_grid {
        let eval = evaluate_beta(&gaps, beta, bins);
        if best.is_none_or(|(o, _)| eval.total_overlap < o) {
            best = Some((eval.total_overlap, beta));
        }
        let stop = eval.mean_common > eval.mean_teacher;
        per_beta.push(eval);
        if stop {
            stopped_early = true;
            break;
        }
    }
    let (_, best_beta) = best.expect("grid is nonempty after validation");
    Ok(BetaSearchReport {
        best_beta,
        per_beta,
        stopped_early,
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provenance::default_beta_grid;
    use crate::trace::{ActionProbs, RoleCounts, ScoredAction};
    use proptest::prelude::*;

    #[test]
    fn overlap_examples() {
        let a = [0.2, 0.4, 0.4, 0.9];
        assert_eq!(histogram_overlap(&a, &a, 20), 1.0);
        let lo = [0.0, 0.01, 0.049];
        let hi = [0.95, 0.99, 1.0];
        assert_eq!(histogram_overlap(&lo, &hi, 20), 0.0);
        assert_eq!(histogram_overlap(&[0.1, 0.1], &[0.1, 0.9], 10), 0.5);
        assert_eq!(histogram_overlap(&[], &a, 20), 0.0);
        assert_eq!(histogram_overlap(&a, &[], 20), 0.0);
    }

    pub(crate) fn trajectory_from_gaps(id: usize, gaps: &[f64]) -> AlignedTrajectory {
        AlignedTrajectory {
            question_id: format!("q{id:04}"),
            response_id: "r0".into(),
            text: String::new(),
            actions: gaps
                .iter()
                .enumerate()
                .map(|(i, &g)| ScoredAction {
                    index: i + 1,
                    start: i,
                    end: i + 1,
                    is_special: false,
                    probs: Some(ActionProbs {
                        teacher: 0.5 + g / 2.0,
                        student: 0.5 - g / 2.0,
                        distilled: None,
                    }),
                    token_counts: RoleCounts {
                        teacher: 1,
                        student: 1,
                        distilled: 0,
                    },
                })
                .collect(),
            correct: None,
            has_distilled: false,
            unassigned_tokens: RoleCounts::default(),
        }
    }

    #[test]
    fn degenerate_corpus_stops_at_first_beta() {
        let corpus: Vec<_> = (0..5).map(|i| trajectory_from_gaps(i, &[0.0; 8])).collect();
        let report = search_beta(&corpus, &ThresholdConfig::default(), DEFAULT_BINS).unwrap();
        assert_eq!(report.best_beta, 0.05);
        assert!(report.stopped_early);
        assert_eq!(report.per_beta.len(), 1);
        assert_eq!(report.per_beta[0].mean_common, 1.0);
        assert_eq!(report.per_beta[0].mean_teacher, 0.0);
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(matches!(
            search_beta(&[], &ThresholdConfig::default(), 20),
            Err(Error::EmptyCorpus)
        ));
        let corpus = vec![trajectory_from_gaps(0, &[])];
        assert!(matches!(
            search_beta(&corpus, &ThresholdConfig::default(), 20),
            Err(Error::NoScorableActions)
        ));
    }

    #[test]
    fn grid_values_are_exact_decimals() {
        let grid = default_beta_grid();
        assert_eq!(grid.len(), 20);
        assert_eq!(grid[0], 0.05);
        assert_eq!(grid[5], 0.3);
        assert_eq!(grid[19], 1.0);
    }

    proptest! {
        #[test]
        fn overlap_is_symmetric_and_bounded(
            a in prop::collection::vec(0.0f64..=1.0, 0..40),
            b in prop::collection::vec(0.0f64..=1.0, 0..40),
            bins in 1usize..30,
        ) {
            let ab = histogram_overlap(&a, &b, bins);
            let ba = histogram_overlap(&b, &a, bins);
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
            if !a.is_empty() {
                prop_assert!((histogram_overlap(&a, &a, bins) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn search_returns_grid_member(seed in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 1..10), 1..10)) {
            let corpus: Vec<_> = seed.iter().enumerate().map(|(i, g)| trajectory_from_gaps(i, g)).collect();
            let cfg = ThresholdConfig::default();
            let a = search_beta(&corpus, &cfg, 20).unwrap();
            let b = search_beta(&corpus, &cfg, 20).unwrap();
            prop_assert!(cfg.beta_grid.contains(&a.best_beta));
            let min = a.per_beta.iter().map(|e| e.total_overlap).fold(f64::INFINITY, f64::min);
            let first = a.per_beta.iter().find(|e| e.total_overlap == min).unwrap();
            prop_assert_eq!(first.beta, a.best_beta);
            prop_assert_eq!(a, b);
        }
    }
}
