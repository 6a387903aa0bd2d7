use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ngram::{score_with_ngram, unigram_symmetric_kl, Mixture, NGramModel, UnitModel, UNK};
use crate::analytics::{rank_candidate_teachers, TeacherRanking};
use crate::beta::{search_beta, BetaSearchReport, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::provenance::{classify_trajectory, Label, Mode, ThresholdConfig, DEFAULT_ALPHA};
use crate::segment::default_special_tokens;
use crate::trace::{
    build_trajectories, ActionProbs, AlignedTrajectory, ModelRole, ModelTrace, RoleCounts, ScoredAction,
};

pub const TEACHER_NAME: &str = "ngram-teacher";
pub const STUDENT_NAME: &str = "ngram-student";
pub const DISTILLED_NAME: &str = "ngram-mixture";
pub const UNRELATED_NAME: &str = "ngram-unrelated";

const TEACHER_SYLLABLES: [&str; 8] = ["ka", "lo", "mi", "ru", "te", "so", "na", "vi"];
const STUDENT_SYLLABLES: [&str; 8] = ["bex", "dup", "gor", "hil", "jat", "wom", "zef", "pyr"];
const UNRELATED_SYLLABLES: [&str; 8] = ["qua", "fyn", "xor", "blu", "tre", "sna", "plo", "gri"];

// independent random streams derived from one seed
const STREAM_GRAMMAR: u64 = 1;
const STREAM_CORPUS: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_SOURCE: u64 = 4;
const STREAM_TEACHER: u64 = 5;
const STREAM_STUDENT: u64 = 6;
const STREAM_UNRELATED: u64 = 7;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTrajectory {
    pub question_id: String,
    pub response_id: String,
    pub text: String,
    /// Generating model of each sentence, in order.
    pub sources: Vec<Source>,
    pub lambda: f64,
}

/// A small first-order sentence grammar: a capitalized opening word, a run
/// of lowercase words, and a closing word ending in ".". Every word has a
/// couple of preferred successors, which keeps fitted models peaked.
#[derive(Debug, Clone)]
struct Grammar {
    starts: Vec<String>,
    middles: Vec<String>,
    ends: Vec<String>,
    /// successors among `middles`, for starts then middles
    next_middle: Vec<[usize; 2]>,
    /// preferred closing word per middle word
    next_end: Vec<usize>,
}

const STARTS: usize = 6;
const MIDDLES: usize = 24;
const ENDS: usize = 6;

impl Grammar {
    fn generate(syllables: &[&str], rng: &mut ChaCha8Rng) -> Grammar {
        let mut words: Vec<String> = Vec::new();
        for a in syllables {
            for b in syllables {
                words.push(format!("{a}{b}"));
            }
        }
        let picked: Vec<String> = words.choose_multiple(rng, STARTS + MIDDLES + ENDS).cloned().collect();
        Grammar::from_words(&picked, rng)
    }

    fn from_words(picked: &[String], rng: &mut ChaCha8Rng) -> Grammar {
        let capitalize = |w: &str| {
            let mut c = w.chars();
            c.next()
                .map(|f| f.to_ascii_uppercase().to_string() + c.as_str())
                .unwrap_or_default()
        };
        let starts = picked[..STARTS].iter().map(|w| capitalize(w)).collect();
        let middles = picked[STARTS..STARTS + MIDDLES].to_vec();
        let ends = picked[STARTS + MIDDLES..].iter().map(|w| format!("{w}.")).collect();
        let next_middle = (0..STARTS + MIDDLES)
            .map(|_| {
                let a = rng.random_range(0..MIDDLES);
                let b = (a + 1 + rng.random_range(0..MIDDLES - 1)) % MIDDLES;
                [a, b]
            })
            .collect();
        let next_end = (0..MIDDLES).map(|_| rng.random_range(0..ENDS)).collect();
        Grammar {
            starts,
            middles,
            ends,
            next_middle,
            next_end,
        }
    }

    /// Same structure over another word list.
    fn relabel(&self, syllables: &[&str], rng: &mut ChaCha8Rng) -> Grammar {
        let fresh = Grammar::generate(syllables, rng);
        Grammar {
            starts: fresh.starts,
            middles: fresh.middles,
            ends: fresh.ends,
            ..self.clone()
        }
    }

    /// Sentence as a list of (slot kind, index) pairs.
    fn sentence_slots(&self, rng: &mut ChaCha8Rng) -> Vec<(u8, usize)> {
        let s = rng.random_range(0..STARTS);
        let mut slots = vec![(0u8, s)];
        let mut pref = self.next_middle[s];
        loop {
            let m = if rng.random_bool(0.75) { pref[0] } else { pref[1] };
            slots.push((1, m));
            let len = slots.len();
            if len >= 7 || (len >= 3 && rng.random_bool(0.35)) {
                slots.push((2, self.next_end[m]));
                return slots;
            }
            pref = self.next_middle[STARTS + m];
        }
    }

    fn render(&self, slots: &[(u8, usize)]) -> Vec<&str> {
        slots
            .iter()
            .map(|&(kind, i)| match kind {
                0 => self.starts[i].as_str(),
                1 => self.middles[i].as_str(),
                _ => self.ends[i].as_str(),
            })
            .collect()
    }
}

/// Teacher and student models fitted on corpora with a controlled overlap.
///
/// Both corpora share sentence structure. The student corpus is the teacher
/// corpus with each word independently swapped for its counterpart in a
/// disjoint vocabulary with probability `separation`: 0 gives identical
/// corpora and 1 gives fully disjoint vocabularies.
#[derive(Debug, Clone)]
pub struct Lab {
    pub separation: f64,
    pub teacher: NGramModel,
    pub student: NGramModel,
    pub teacher_corpus: Vec<String>,
    pub student_corpus: Vec<String>,
    seed: u64,
    order: usize,
    k: f64,
}

impl Lab {
    pub fn build(separation: f64, corpus_sentences: usize, order: usize, k: f64, seed: u64) -> Result<Lab> {
        if !(0.0..=1.0).contains(&separation) {
            return Err(Error::Config(format!(
                "separation must lie in [0, 1], got {separation}"
            )));
        }
        if corpus_sentences == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut grng = rng(seed, STREAM_GRAMMAR);
        let teacher_grammar = Grammar::generate(&TEACHER_SYLLABLES, &mut grng);
        let student_grammar = teacher_grammar.relabel(&STUDENT_SYLLABLES, &mut grng);

        let mut crng = rng(seed, STREAM_CORPUS);
        let mut nrng = rng(seed, STREAM_NOISE);
        let mut teacher_corpus = Vec::with_capacity(corpus_sentences);
        let mut student_corpus = Vec::with_capacity(corpus_sentences);
        for _ in 0..corpus_sentences {
            let slots = teacher_grammar.sentence_slots(&mut crng);
            let t = teacher_grammar.render(&slots);
            let s = student_grammar.render(&slots);
            let mixed: Vec<&str> = t
                .iter()
                .zip(&s)
                .map(|(tw, sw)| if nrng.random::<f64>() < separation { *sw } else { *tw })
                .collect();
            teacher_corpus.push(t.join(" "));
            student_corpus.push(mixed.join(" "));
        }
        Ok(Lab {
            separation,
            teacher: NGramModel::fit(&teacher_corpus, order, k, true)?,
            student: NGramModel::fit(&student_corpus, order, k, true)?,
            teacher_corpus,
            student_corpus,
            seed,
            order,
            k,
        })
    }

    /// A third model over its own vocabulary and structure, unrelated to
    /// both teacher and student.
    pub fn unrelated(&self) -> Result<NGramModel> {
        let mut r = rng(self.seed, STREAM_UNRELATED);
        let grammar = Grammar::generate(&UNRELATED_SYLLABLES, &mut r);
        let corpus: Vec<String> = (0..self.teacher_corpus.len())
            .map(|_| grammar.render(&grammar.sentence_slots(&mut r)).join(" "))
            .collect();
        NGramModel::fit(&corpus, self.order, self.k, true)
    }

    pub fn unigram_kl(&self) -> f64 {
        unigram_symmetric_kl(&self.teacher, &self.student)
    }
}

const MAX_SENTENCE_WORDS: usize = 16;
/// Transitions below this probability exist only through smoothing mass and
/// are not part of a well-formed sentence.
const MIN_STEP_PROB: f64 = 1e-3;
const MAX_ATTEMPTS: usize = 10_000;

/// Draws whole sentences from one model given the text produced so far,
/// rejecting anything outside the sentence template.
struct SentenceSampler<'a> {
    model: &'a NGramModel,
    rng: ChaCha8Rng,
}

impl<'a> SentenceSampler<'a> {
    fn new(model: &'a NGramModel, rng: ChaCha8Rng) -> Self {
        Self { model, rng }
    }

    fn attempt(&mut self, history: &[&str]) -> Option<Vec<String>> {
        let keep = self.model.order().saturating_sub(1);
        let mut ctx: Vec<&str> = history[history.len().saturating_sub(keep)..].to_vec();
        let mut words: Vec<String> = Vec::new();
        while words.len() < MAX_SENTENCE_WORDS {
            let hist = &ctx[ctx.len().saturating_sub(keep)..];
            let w = self.model.sample_next(hist, &mut self.rng);
            let first = w.chars().next()?;
            let ok = w != UNK
                && self.model.prob(hist, w) >= MIN_STEP_PROB
                && if words.is_empty() {
                    first.is_ascii_uppercase() && !w.ends_with('.')
                } else {
                    first.is_ascii_lowercase()
                };
            if !ok {
                return None;
            }
            ctx.push(w);
            words.push(w.to_string());
            if w.ends_with('.') {
                return (words.len() >= 2).then_some(words);
            }
        }
        None
    }

    fn next_sentence(&mut self, history: &[&str]) -> Result<Vec<String>> {
        for _ in 0..MAX_ATTEMPTS {
            if let Some(words) = self.attempt(history) {
                return Ok(words);
            }
        }
        Err(Error::NGram("could not sample a well-formed sentence".into()))
    }
}

/// Samples trajectories whose sentences come from the teacher with
/// probability `lambda` and from the student otherwise.
pub fn sample_planted(
    teacher: &NGramModel,
    student: &NGramModel,
    lambda: f64,
    sentences_per_trajectory: usize,
    trajectories: usize,
    seed: u64,
) -> Result<Vec<PlantedTrajectory>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let mut source_rng = rng(seed, STREAM_SOURCE);
    let mut t = SentenceSampler::new(teacher, rng(seed, STREAM_TEACHER));
    let mut s = SentenceSampler::new(student, rng(seed, STREAM_STUDENT));
    let mut out = Vec::with_capacity(trajectories);
    for i in 0..trajectories {
        let mut sources = Vec::with_capacity(sentences_per_trajectory);
        let mut words: Vec<String> = Vec::new();
        for _ in 0..sentences_per_trajectory {
            let history: Vec<&str> = words.iter().map(String::as_str).collect();
            let sentence = if source_rng.random::<f64>() < lambda {
                sources.push(Source::Teacher);
                t.next_sentence(&history)?
            } else {
                sources.push(Source::Student);
                s.next_sentence(&history)?
            };
            words.extend(sentence);
        }
        out.push(PlantedTrajectory {
            question_id: format!("q{i:05}"),
            response_id: "r0".into(),
            text: words.join(" "),
            sources,
            lambda,
        });
    }
    Ok(out)
}

/// Scores planted trajectories under teacher, student and the per-unit
/// mixture `lambda * teacher + (1 - lambda) * student` as the distilled role.
pub fn score_planted<T: UnitModel>(
    planted: &[PlantedTrajectory],
    teacher: (&T, &str),
    student: &NGramModel,
    mixture_teacher: &NGramModel,
    lambda: f64,
) -> Vec<ModelTrace> {
    let distilled = Mixture {
        a: mixture_teacher,
        b: student,
        lambda,
    };
    planted
        .par_iter()
        .flat_map_iter(|p| {
            let q = p.question_id.as_str();
            let r = p.response_id.as_str();
            [
                score_with_ngram(teacher.0, &p.text, q, r, ModelRole::Teacher, teacher.1),
                score_with_ngram(student, &p.text, q, r, ModelRole::Student, STUDENT_NAME),
                score_with_ngram(&distilled, &p.text, q, r, ModelRole::Distilled, DISTILLED_NAME),
            ]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    /// Vocabulary separation between teacher and student corpora, in [0, 1].
    pub separation: f64,
    pub lambda: f64,
    pub alpha: f64,
    /// Fixed beta, or `None` to search for it.
    pub beta: Option<f64>,
    pub trajectories: usize,
    pub sentences: usize,
    pub corpus_sentences: usize,
    pub order: usize,
    pub k: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            separation: 1.0,
            lambda: 0.5,
            alpha: DEFAULT_ALPHA,
            beta: None,
            trajectories: 200,
            sentences: 20,
            corpus_sentences: 2000,
            order: 2,
            k: 0.01,
            seed: 0,
        }
    }
}

/// How planted sentences of one source were labeled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub teacher: usize,
    pub student: usize,
    pub common: usize,
    pub unscorable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedReport {
    pub separation: f64,
    pub unigram_kl: f64,
    pub lambda: f64,
    pub chosen_beta: f64,
    /// Undefined (null) when `no_separation` is set.
    pub teacher_recall: Option<f64>,
    pub teacher_precision: Option<f64>,
    pub student_recall: Option<f64>,
    pub student_precision: Option<f64>,
    /// Set when almost every sentence lands in Common, i.e. the models
    /// carry no usable teacher/student signal.
    pub no_separation: bool,
    /// Common labels count as misses for recall; these are the totals.
    pub abstentions: usize,
    pub planted_teacher: LabelCounts,
    pub planted_student: LabelCounts,
    pub beta_search: Option<BetaSearchReport>,
}

pub struct PlantedRun {
    pub report: PlantedReport,
    pub planted: Vec<PlantedTrajectory>,
    pub traces: Vec<ModelTrace>,
    pub lab: Lab,
}

/// Below this share of Teacher/Student labels a run is flagged as having
/// no separation.
const SEPARATION_FLOOR: f64 = 0.05;

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn joined(traces: &[ModelTrace], planted: &[PlantedTrajectory]) -> Result<Vec<AlignedTrajectory>> {
    let outcome = build_trajectories(traces, &default_special_tokens(), true);
    if let Some(e) = outcome.skipped.first() {
        return Err(Error::NGram(format!(
            "planted trajectory {} failed to join: {}",
            e.key, e.detail
        )));
    }
    for (traj, p) in outcome.trajectories.iter().zip(planted) {
        if traj.actions.len() != p.sources.len() {
            return Err(Error::NGram(format!(
                "{}/{}: {} actions for {} planted sentences",
                p.question_id,
                p.response_id,
                traj.actions.len(),
                p.sources.len()
            )));
        }
    }
    Ok(outcome.trajectories)
}

fn resolve_beta(
    corpus: &[AlignedTrajectory],
    alpha: f64,
    beta: Option<f64>,
) -> Result<(ThresholdConfig, Option<BetaSearchReport>)> {
    let base = ThresholdConfig::new(alpha, beta.unwrap_or(crate::provenance::DEFAULT_BETA))?;
    match beta {
        Some(_) => Ok((base, None)),
        None => {
            let report = search_beta(corpus, &base, DEFAULT_BINS)?;
            Ok((base.with_beta(report.best_beta), Some(report)))
        }
    }
}

/// Builds the lab, samples planted trajectories, scores them under all
/// three roles, classifies in train mode and compares labels with the
/// planted sources.
pub fn run_planted_experiment(cfg: &PlantedConfig) -> Result<PlantedRun> {
    let lab = Lab::build(cfg.separation, cfg.corpus_sentences, cfg.order, cfg.k, cfg.seed)?;
    let planted = sample_planted(
        &lab.teacher,
        &lab.student,
        cfg.lambda,
        cfg.sentences,
        cfg.trajectories,
        cfg.seed,
    )?;
    let traces = score_planted(
        &planted,
        (&lab.teacher, TEACHER_NAME),
        &lab.student,
        &lab.teacher,
        cfg.lambda,
    );
    let corpus = joined(&traces, &planted)?;
    let (thresholds, beta_search) = resolve_beta(&corpus, cfg.alpha, cfg.beta)?;

    let mut planted_teacher = LabelCounts::default();
    let mut planted_student = LabelCounts::default();
    for (traj, p) in corpus.iter().zip(&planted) {
        let classified = classify_trajectory(traj, &thresholds, Mode::Train)?;
        let mut labels = classified.labels.iter().peekable();
        for (j, source) in p.sources.iter().enumerate() {
            let counts = match source {
                Source::Teacher => &mut planted_teacher,
                Source::Student => &mut planted_student,
            };
            match labels.next_if(|l| l.index == j + 1) {
                None => counts.unscorable += 1,
                Some(l) => match l.label {
                    Label::Teacher => counts.teacher += 1,
                    Label::Student => counts.student += 1,
                    _ => counts.common += 1,
                },
            }
        }
    }

    let labeled = |c: &LabelCounts| c.teacher + c.student + c.common;
    let decided = planted_teacher.teacher + planted_teacher.student + planted_student.teacher + planted_student.student;
    let total = labeled(&planted_teacher) + labeled(&planted_student);
    let no_separation = total == 0 || (decided as f64) < SEPARATION_FLOOR * total as f64;
    let defined = |v: Option<f64>| if no_separation { None } else { v };

    let report = PlantedReport {
        separation: cfg.separation,
        unigram_kl: lab.unigram_kl(),
        lambda: cfg.lambda,
        chosen_beta: thresholds.beta,
        teacher_recall: defined(ratio(planted_teacher.teacher, labeled(&planted_teacher))),
        teacher_precision: defined(ratio(
            planted_teacher.teacher,
            planted_teacher.teacher + planted_student.teacher,
        )),
        student_recall: defined(ratio(planted_student.student, labeled(&planted_student))),
        student_precision: defined(ratio(
            planted_student.student,
            planted_student.student + planted_teacher.student,
        )),
        no_separation,
        abstentions: planted_teacher.common + planted_student.common,
        planted_teacher,
        planted_student,
        beta_search,
    };
    Ok(PlantedRun {
        report,
        planted,
        traces,
        lab,
    })
}

/// Scores the planted corpus of `cfg` with the true teacher and with an
/// unrelated model in the teacher role, classifies each in test mode with
/// its own searched beta, and ranks the two candidates.
pub fn rank_planted_teachers(cfg: &PlantedConfig) -> Result<TeacherRanking> {
    let lab = Lab::build(cfg.separation, cfg.corpus_sentences, cfg.order, cfg.k, cfg.seed)?;
    let unrelated = lab.unrelated()?;
    let planted = sample_planted(
        &lab.teacher,
        &lab.student,
        cfg.lambda,
        cfg.sentences,
        cfg.trajectories,
        cfg.seed,
    )?;
    let mut corpora = BTreeMap::new();
    for (name, traces) in [
        (
            TEACHER_NAME,
            score_planted(
                &planted,
                (&lab.teacher, TEACHER_NAME),
                &lab.student,
                &lab.teacher,
                cfg.lambda,
            ),
        ),
        (
            UNRELATED_NAME,
            score_planted(
                &planted,
                (&unrelated, UNRELATED_NAME),
                &lab.student,
                &lab.teacher,
                cfg.lambda,
            ),
        ),
    ] {
        let corpus = joined(&traces, &planted)?;
        let (thresholds, _) = resolve_beta(&corpus, cfg.alpha, cfg.beta)?;
        let classified = corpus
            .iter()
            .map(|t| classify_trajectory(t, &thresholds, Mode::Test))
            .collect::<Result<Vec<_>>>()?;
        corpora.insert(name.to_string(), classified);
    }
    rank_candidate_teachers(&corpora)
}

/// A corpus of bare teacher/student probabilities with two populations of
/// trajectories whose |p_t - p_s| values cluster on either side of `center`.
///
/// Every trajectory has `actions` actions: one or two near-zero gaps, five
/// to seven gaps just below `center` with random sign, and the rest clearly
/// above `center`, positive for teacher-heavy and negative for student-heavy
/// trajectories. Needs `actions >= 12` and `center` in [0.1, 0.5].
pub fn planted_gap_corpus(
    trajectories: usize,
    actions: usize,
    center: f64,
    seed: u64,
) -> Result<Vec<AlignedTrajectory>> {
    if actions < 12 || !(0.1..=0.5).contains(&center) {
        return Err(Error::Config(
            "gap corpus needs at least 12 actions and a center in [0.1, 0.5]".into(),
        ));
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let noise: Normal<f64> = Normal::new(0.0, 0.04).expect("valid normal");
    let mut corpus = Vec::with_capacity(trajectories);
    for i in 0..trajectories {
        let teacher_heavy = i % 2 == 0;
        let near_zero = r.random_range(1..=2);
        let small = r.random_range(5..=7);
        let mut gaps = Vec::with_capacity(actions);
        for _ in 0..near_zero {
            gaps.push(r.random_range(-0.03..0.03));
        }
        for _ in 0..small {
            let mag = (center - noise.sample(&mut r).abs()).clamp(0.06, center - 0.005);
            gaps.push(if r.random_bool(0.5) { mag } else { -mag });
        }
        while gaps.len() < actions {
            let mag = (center + 0.02 + noise.sample(&mut r).abs()).min(0.6);
            gaps.push(if teacher_heavy { mag } else { -mag });
        }
        let mid_actions = gaps
            .iter()
            .enumerate()
            .map(|(j, &g)| {
                let m = r.random_range(0.35..0.65);
                ScoredAction {
                    index: j + 1,
                    start: j,
                    end: j + 1,
                    is_special: false,
                    probs: Some(ActionProbs {
                        teacher: m + g / 2.0,
                        student: m - g / 2.0,
                        distilled: None,
                    }),
                    token_counts: RoleCounts {
                        teacher: 1,
                        student: 1,
                        distilled: 0,
                    },
                }
            })
            .collect();
        corpus.push(AlignedTrajectory {
            question_id: format!("g{i:05}"),
            response_id: "r0".into(),
            text: ".".repeat(actions),
            actions: mid_actions,
            correct: None,
            has_distilled: false,
            unassigned_tokens: RoleCounts::default(),
        });
    }
    Ok(corpus)
}
