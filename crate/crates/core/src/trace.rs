//! Trace data model, the line-delimited trace file format, corpus validation,
//! and joining of per-role traces into scored trajectories.
//!
//! A trace is one model's teacher-forced token log-probabilities over one
//! response text. Offsets are byte offsets into the UTF-8 text. Teacher,
//! student and distilled models may tokenize the same text differently, so
//! each role carries its own token list and is aligned to actions on its own.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provenance::sentence_prob;
use crate::segment::{align_tokens, segment_text, ActionSpan};

/// Largest positive log-probability accepted as scoring noise and clamped to 0.
pub const LOGPROB_CLAMP_LIMIT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Teacher,
    Student,
    Distilled,
}

impl ModelRole {
    pub const ALL: [ModelRole; 3] = [ModelRole::Teacher, ModelRole::Student, ModelRole::Distilled];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Teacher => "teacher",
            ModelRole::Student => "student",
            ModelRole::Distilled => "distilled",
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(ModelRole::Teacher),
            "student" => Ok(ModelRole::Student),
            "distilled" => Ok(ModelRole::Distilled),
            other => Err(Error::Config(format!("unknown model role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub text: String,
    pub logprob: f64,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTrace {
    pub question_id: String,
    pub response_id: String,
    pub model_role: ModelRole,
    pub model_name: String,
    pub text: String,
    pub tokens: Vec<TokenScore>,
    #[serde(default)]
    pub correct: Option<bool>,
    #[serde(default)]
    pub domain_tag: Option<String>,
}

/// Identity of one response across roles.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TraceKey {
    pub question_id: String,
    pub response_id: String,
}

impl fmt::Display for TraceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.question_id, self.response_id)
    }
}

/// A schema violation found in one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: &'static str,
    pub detail: String,
}

impl ModelTrace {
    pub fn key(&self) -> TraceKey {
        TraceKey {
            question_id: self.question_id.clone(),
            response_id: self.response_id.clone(),
        }
    }

    /// Checks token invariants and clamps positive log-probabilities within
    /// [`LOGPROB_CLAMP_LIMIT`] to zero. Returns the number of clamped tokens.
    pub fn normalize(&mut self) -> std::result::Result<usize, Violation> {
        let len = self.text.len();
        let mut clamped = 0;
        let mut prev_end = 0usize;
        for (i, tok) in self.tokens.iter_mut().enumerate() {
            if tok.start >= tok.end {
                return Err(Violation {
                    kind: "invalid_span",
                    detail: format!("invalid span: token {i} has start {} >= end {}", tok.start, tok.end),
                });
            }
            if tok.end > len {
                return Err(Violation {
                    kind: "offset_out_of_range",
                    detail: format!(
                        "offset out of range: token {i} ends at {} but text has {len} bytes",
                        tok.end
                    ),
                });
            }
            if i > 0 && tok.start < prev_end {
                return Err(Violation {
                    kind: "overlapping_tokens",
                    detail: format!(
                        "overlapping tokens: token {i} starts at {} before previous end {prev_end}",
                        tok.start
                    ),
                });
            }
            prev_end = tok.end;
            if !tok.logprob.is_finite() {
                return Err(Violation {
                    kind: "non_finite_logprob",
                    detail: format!("token {i} has non-finite logprob"),
                });
            }
            if tok.logprob > LOGPROB_CLAMP_LIMIT {
                return Err(Violation {
                    kind: "positive_logprob",
                    detail: format!("token {i} has logprob {} > {LOGPROB_CLAMP_LIMIT}", tok.logprob),
                });
            }
            if tok.logprob > 0.0 {
                tok.logprob = 0.0;
                clamped += 1;
            }
        }
        Ok(clamped)
    }
}

/// One error record in a validation report. `line` is 1-based when known.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportError {
    pub line: Option<usize>,
    pub key: String,
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClampNotice {
    pub line: usize,
    pub key: String,
    pub tokens: usize,
}

#[derive(Debug, Default)]
pub struct ParsedTraces {
    pub traces: Vec<ModelTrace>,
    /// Source line of each entry in `traces`.
    pub lines: Vec<usize>,
    pub errors: Vec<ReportError>,
    pub clamped: Vec<ClampNotice>,
}

fn line_key(value: &serde_json::Value) -> String {
    let field = |name: &str| value.get(name).and_then(|v| v.as_str()).unwrap_or("?").to_string();
    format!(
        "{}/{}/{}",
        field("question_id"),
        field("response_id"),
        field("model_role")
    )
}

/// Parses a newline-delimited trace stream. Schema violations are collected
/// per line; only an unreadable stream is a hard error.
pub fn parse_trace_file<R: BufRead>(reader: R) -> Result<ParsedTraces> {
    let mut out = ParsedTraces::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                out.errors.push(ReportError {
                    line: Some(lineno),
                    key: "?".into(),
                    kind: "malformed_json".into(),
                    detail: e.to_string(),
                });
                continue;
            }
        };
        let key = line_key(&value);
        let mut trace: ModelTrace = match serde_json::from_value(value) {
            Ok(t) => t,
            Err(e) => {
                let msg = e.to_string();
                let kind = if msg.starts_with("missing field") {
                    "missing_field"
                } else {
                    "schema"
                };
                out.errors.push(ReportError {
                    line: Some(lineno),
                    key,
                    kind: kind.into(),
                    detail: msg,
                });
                continue;
            }
        };
        match trace.normalize() {
            Ok(clamped) => {
                if clamped > 0 {
                    log::warn!("line {lineno} ({key}): clamped {clamped} positive logprob(s) to 0");
                    out.clamped.push(ClampNotice {
                        line: lineno,
                        key,
                        tokens: clamped,
                    });
                }
                out.traces.push(trace);
                out.lines.push(lineno);
            }
            Err(v) => out.errors.push(ReportError {
                line: Some(lineno),
                key,
                kind: v.kind.into(),
                detail: v.detail,
            }),
        }
    }
    Ok(out)
}

pub fn write_traces<'a, W, I>(mut writer: W, traces: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a ModelTrace>,
{
    for trace in traces {
        serde_json::to_writer(&mut writer, trace)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub traces: usize,
    pub complete: usize,
    pub errors: Vec<ReportError>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }

    /// Folds per-line parse errors into the report, ahead of corpus errors.
    pub fn with_parse_errors(mut self, parse_errors: &[ReportError]) -> Self {
        let mut errors = parse_errors.to_vec();
        errors.append(&mut self.errors);
        self.errors = errors;
        self
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} traces, {} complete trajectories, {} errors",
            self.traces,
            self.complete,
            self.errors.len()
        )
    }
}

/// Picks the text shared by most roles and names the first role that disagrees.
fn find_text_mismatch(by_role: &[(ModelRole, &ModelTrace)]) -> Option<ModelRole> {
    let mut votes: Vec<(&str, usize)> = Vec::new();
    for (_, t) in by_role {
        match votes.iter_mut().find(|(text, _)| *text == t.text) {
            Some(v) => v.1 += 1,
            None => votes.push((t.text.as_str(), 1)),
        }
    }
    if votes.len() <= 1 {
        return None;
    }
    let top = votes.iter().map(|v| v.1).max().unwrap_or(0);
    let tied: Vec<&str> = votes.iter().filter(|v| v.1 == top).map(|v| v.0).collect();
    // ties resolve towards the distilled text, then teacher
    let reference = [ModelRole::Distilled, ModelRole::Teacher, ModelRole::Student]
        .iter()
        .filter_map(|r| by_role.iter().find(|(role, _)| role == r))
        .map(|(_, t)| t.text.as_str())
        .find(|text| tied.contains(text))
        .unwrap_or(tied[0]);
    by_role.iter().find(|(_, t)| t.text != reference).map(|(r, _)| *r)
}

pub fn validate_corpus(traces: &[ModelTrace]) -> ValidationReport {
    let mut groups: BTreeMap<TraceKey, Vec<&ModelTrace>> = BTreeMap::new();
    for t in traces {
        groups.entry(t.key()).or_default().push(t);
    }
    let mut errors = Vec::new();
    let mut complete = 0;
    for (key, members) in &groups {
        let mut by_role: Vec<(ModelRole, &ModelTrace)> = Vec::new();
        let mut clean = true;
        for t in members {
            if by_role.iter().any(|(r, _)| *r == t.model_role) {
                clean = false;
                errors.push(ReportError {
                    line: None,
                    key: format!("{key}/{}", t.model_role),
                    kind: "duplicate".into(),
                    detail: format!("duplicate key {key}/{}", t.model_role),
                });
            } else {
                by_role.push((t.model_role, t));
            }
        }
        by_role.sort_by_key(|(r, _)| *r);
        let missing: Vec<&str> = ModelRole::ALL
            .iter()
            .filter(|r| !by_role.iter().any(|(have, _)| have == *r))
            .map(|r| r.as_str())
            .collect();
        if !missing.is_empty() {
            clean = false;
            errors.push(ReportError {
                line: None,
                key: key.to_string(),
                kind: "incomplete".into(),
                detail: format!("missing roles: {}", missing.join(",")),
            });
        }
        if let Some(role) = find_text_mismatch(&by_role) {
            clean = false;
            errors.push(ReportError {
                line: None,
                key: key.to_string(),
                kind: "text_mismatch".into(),
                detail: format!("text mismatch: {role}"),
            });
        }
        if clean {
            complete += 1;
        }
    }
    ValidationReport {
        traces: traces.len(),
        complete,
        errors,
    }
}

/// Per-role integer, e.g. aligned token counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleCounts {
    pub teacher: usize,
    pub student: usize,
    pub distilled: usize,
}

impl RoleCounts {
    pub fn get(&self, role: ModelRole) -> usize {
        match role {
            ModelRole::Teacher => self.teacher,
            ModelRole::Student => self.student,
            ModelRole::Distilled => self.distilled,
        }
    }

    fn get_mut(&mut self, role: ModelRole) -> &mut usize {
        match role {
            ModelRole::Teacher => &mut self.teacher,
            ModelRole::Student => &mut self.student,
            ModelRole::Distilled => &mut self.distilled,
        }
    }
}

/// Sentence probabilities of one scorable action. `distilled` is absent when
/// the trajectory was joined without a distilled trace (training data).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionProbs {
    pub teacher: f64,
    pub student: f64,
    pub distilled: Option<f64>,
}

impl ActionProbs {
    pub fn get(&self, role: ModelRole) -> Option<f64> {
        match role {
            ModelRole::Teacher => Some(self.teacher),
            ModelRole::Student => Some(self.student),
            ModelRole::Distilled => self.distilled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAction {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub is_special: bool,
    /// `None` when some present role has no aligned token inside the span.
    pub probs: Option<ActionProbs>,
    pub token_counts: RoleCounts,
}

impl ScoredAction {
    pub fn span(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn is_scorable(&self) -> bool {
        self.probs.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedTrajectory {
    pub question_id: String,
    pub response_id: String,
    pub text: String,
    pub actions: Vec<ScoredAction>,
    pub correct: Option<bool>,
    pub has_distilled: bool,
    /// Tokens per role whose first byte fell outside every action span.
    pub unassigned_tokens: RoleCounts,
}

impl AlignedTrajectory {
    pub fn key(&self) -> TraceKey {
        TraceKey {
            question_id: self.question_id.clone(),
            response_id: self.response_id.clone(),
        }
    }

    pub fn scorable(&self) -> impl Iterator<Item = (&ScoredAction, &ActionProbs)> {
        self.actions.iter().filter_map(|a| a.probs.as_ref().map(|p| (a, p)))
    }

    pub fn unscorable_count(&self) -> usize {
        self.actions.iter().filter(|a| a.probs.is_none()).count()
    }
}

/// Joins per-role traces of one response into a scored trajectory. Roles are
/// identified by each trace's `model_role`, so argument order is irrelevant.
/// Teacher and student are required; distilled is optional.
pub fn join_traces(traces: &[&ModelTrace], spans: &[ActionSpan]) -> Result<AlignedTrajectory> {
    let mut by_role: Vec<(ModelRole, &ModelTrace)> = Vec::with_capacity(3);
    for t in traces {
        if by_role.iter().any(|(r, _)| *r == t.model_role) {
            return Err(Error::DuplicateRole {
                role: t.model_role,
                key: t.key().to_string(),
            });
        }
        by_role.push((t.model_role, t));
    }
    by_role.sort_by_key(|(r, _)| *r);
    let anchor = by_role.first().map(|(_, t)| *t).ok_or(Error::EmptyCorpus)?;
    let key = anchor.key();
    for role in [ModelRole::Teacher, ModelRole::Student] {
        if !by_role.iter().any(|(r, _)| *r == role) {
            return Err(Error::MissingRole {
                role,
                key: key.to_string(),
            });
        }
    }
    for (role, t) in &by_role {
        if t.question_id != anchor.question_id || t.response_id != anchor.response_id {
            return Err(Error::IdMismatch {
                role: *role,
                expected: key.to_string(),
                found: t.key().to_string(),
            });
        }
    }
    if let Some(role) = find_text_mismatch(&by_role) {
        return Err(Error::TextMismatch(role));
    }

    let has_distilled = by_role.iter().any(|(r, _)| *r == ModelRole::Distilled);
    let mut counts = vec![RoleCounts::default(); spans.len()];
    let mut probs: Vec<[Option<f64>; 3]> = vec![[None; 3]; spans.len()];
    let mut unassigned = RoleCounts::default();
    for (role, trace) in &by_role {
        let alignment = align_tokens(spans, &trace.tokens);
        *unassigned.get_mut(*role) = alignment.unassigned;
        for (i, range) in alignment.ranges.iter().enumerate() {
            *counts[i].get_mut(*role) = range.len();
            if !range.is_empty() {
                let lps: Vec<f64> = trace.tokens[range.clone()].iter().map(|t| t.logprob).collect();
                probs[i][*role as usize] = sentence_prob(&lps).ok();
            }
        }
    }

    let actions = spans
        .iter()
        .zip(counts)
        .zip(probs)
        .map(|((span, token_counts), p)| {
            let probs = match (p[0], p[1], p[2], has_distilled) {
                (Some(t), Some(s), Some(d), true) => Some(ActionProbs {
                    teacher: t,
                    student: s,
                    distilled: Some(d),
                }),
                (Some(t), Some(s), _, false) => Some(ActionProbs {
                    teacher: t,
                    student: s,
                    distilled: None,
                }),
                _ => None,
            };
            ScoredAction {
                index: span.index,
                start: span.start,
                end: span.end,
                is_special: span.is_special,
                probs,
                token_counts,
            }
        })
        .collect();

    let correct = [ModelRole::Distilled, ModelRole::Teacher, ModelRole::Student]
        .iter()
        .filter_map(|r| by_role.iter().find(|(role, _)| role == r))
        .find_map(|(_, t)| t.correct);

    Ok(AlignedTrajectory {
        question_id: anchor.question_id.clone(),
        response_id: anchor.response_id.clone(),
        text: anchor.text.clone(),
        actions,
        correct,
        has_distilled,
        unassigned_tokens: unassigned,
    })
}

#[derive(Debug, Default)]
pub struct BuildOutcome {
    pub trajectories: Vec<AlignedTrajectory>,
    /// Responses that could not be joined, one record each.
    pub skipped: Vec<ReportError>,
}

/// Segments and joins every response of a corpus, in (question_id,
/// response_id) order. With `require_distilled`, responses lacking a
/// distilled trace are skipped.
pub fn build_trajectories(traces: &[ModelTrace], special_tokens: &[String], require_distilled: bool) -> BuildOutcome {
    let mut groups: BTreeMap<TraceKey, Vec<&ModelTrace>> = BTreeMap::new();
    for t in traces {
        groups.entry(t.key()).or_default().push(t);
    }
    let groups: Vec<(TraceKey, Vec<&ModelTrace>)> = groups.into_iter().collect();
    let results: Vec<std::result::Result<AlignedTrajectory, ReportError>> = groups
        .par_iter()
        .map(|(key, members)| {
            let skip = |kind: &str, detail: String| ReportError {
                line: None,
                key: key.to_string(),
                kind: kind.into(),
                detail,
            };
            if require_distilled && !members.iter().any(|t| t.model_role == ModelRole::Distilled) {
                return Err(skip("incomplete", "missing roles: distilled".into()));
            }
            let spans = segment_text(&members[0].text, special_tokens);
            join_traces(members, &spans).map_err(|e| {
                let kind = match e {
                    Error::TextMismatch(_) => "text_mismatch",
                    Error::DuplicateRole { .. } => "duplicate",
                    Error::MissingRole { .. } => "incomplete",
                    _ => "join",
                };
                skip(kind, e.to_string())
            })
        })
        .collect();
    let mut out = BuildOutcome::default();
    for r in results {
        match r {
            Ok(t) => out.trajectories.push(t),
            Err(e) => out.skipped.push(e),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(text: &str, logprob: f64, start: usize, end: usize) -> TokenScore {
        TokenScore {
            text: text.into(),
            logprob,
            start,
            end,
        }
    }

    pub(crate) fn trace(role: ModelRole, text: &str, tokens: Vec<TokenScore>) -> ModelTrace {
        ModelTrace {
            question_id: "q1".into(),
            response_id: "r1".into(),
            model_role: role,
            model_name: format!("{role}-model"),
            text: text.into(),
            tokens,
            correct: None,
            domain_tag: None,
        }
    }

    fn parse(s: &str) -> ParsedTraces {
        parse_trace_file(s.as_bytes()).unwrap()
    }

    #[test]
    fn minimal_record() {
        let p = parse(
            r#"{"question_id":"q","response_id":"r","model_role":"teacher","model_name":"m","text":"Hi","tokens":[{"text":"Hi","logprob":-0.1,"start":0,"end":2}],"correct":null,"domain_tag":null}"#,
        );
        assert!(p.errors.is_empty());
        assert_eq!(p.traces.len(), 1);
        assert_eq!(p.traces[0].tokens.len(), 1);
        assert_eq!(p.lines, vec![1]);
    }

    #[test]
    fn reversed_span_is_a_line_error() {
        let p = parse(
            "\n{\"question_id\":\"q\",\"response_id\":\"r\",\"model_role\":\"student\",\"model_name\":\"m\",\"text\":\"Hello\",\"tokens\":[{\"text\":\"x\",\"logprob\":-0.1,\"start\":5,\"end\":3}]}",
        );
        assert!(p.traces.is_empty());
        assert_eq!(p.errors.len(), 1);
        assert_eq!(p.errors[0].line, Some(2));
        assert_eq!(p.errors[0].kind, "invalid_span");
        assert!(p.errors[0].detail.starts_with("invalid span"));
        assert_eq!(p.errors[0].key, "q/r/student");
    }

    #[test]
    fn tiny_positive_logprob_is_clamped() {
        let p = parse(
            r#"{"question_id":"q","response_id":"r","model_role":"teacher","model_name":"m","text":"Hi","tokens":[{"text":"Hi","logprob":3e-7,"start":0,"end":2}]}"#,
        );
        assert!(p.errors.is_empty());
        assert_eq!(p.traces[0].tokens[0].logprob, 0.0);
        assert_eq!(p.clamped.len(), 1);
    }

    #[test]
    fn schema_violations() {
        let cases = [
            (
                r#"{"question_id":"q","response_id":"r","model_role":"teacher","model_name":"m","text":"Hi","tokens":[{"text":"Hi","logprob":0.5,"start":0,"end":2}]}"#,
                "positive_logprob",
            ),
            (
                r#"{"question_id":"q","response_id":"r","model_role":"teacher","model_name":"m","text":"Hi","tokens":[{"text":"Hi","logprob":-1,"start":0,"end":9}]}"#,
                "offset_out_of_range",
            ),
            (
                r#"{"question_id":"q","response_id":"r","model_role":"teacher","model_name":"m","text":"Hello","tokens":[{"text":"Hel","logprob":-1,"start":0,"end":3},{"text":"ll","logprob":-1,"start":2,"end":4}]}"#,
                "overlapping_tokens",
            ),
            (
                r#"{"question_id":"q","response_id":"r","model_role":"teacher","text":"Hi","tokens":[]}"#,
                "missing_field",
            ),
            (
                r#"{"question_id":"q","response_id":"r","model_role":"mentor","model_name":"m","text":"Hi","tokens":[]}"#,
                "schema",
            ),
            (r#"{"question_id": "#, "malformed_json"),
        ];
        for (line, kind) in cases {
            let p = parse(line);
            assert_eq!(p.errors.len(), 1, "{line}");
            assert_eq!(p.errors[0].kind, kind, "{line}");
        }
    }

    #[test]
    fn join_happy_path() {
        let text = "A. B";
        let spans = segment_text(text, &[]);
        assert_eq!(spans.len(), 2);
        let toks = || vec![tok("A.", -0.1, 0, 2), tok(" ", -0.2, 2, 3), tok("B", -0.3, 3, 4)];
        let t = trace(ModelRole::Teacher, text, toks());
        let s = trace(ModelRole::Student, text, toks());
        let d = trace(ModelRole::Distilled, text, toks());
        let traj = join_traces(&[&t, &s, &d], &spans).unwrap();
        assert_eq!(traj.actions.len(), 2);
        assert!(traj.actions.iter().all(|a| a.is_scorable()));
        let p = traj.actions[0].probs.unwrap();
        assert!((p.teacher - (-0.15f64).exp()).abs() < 1e-15);
        assert_eq!(traj.actions[0].index, 1);
        assert_eq!(
            traj.actions[1].token_counts,
            RoleCounts {
                teacher: 1,
                student: 1,
                distilled: 1
            }
        );
    }

    #[test]
    fn join_reports_differing_role() {
        let spans = segment_text("A. B", &[]);
        let t = trace(ModelRole::Teacher, "A. C", vec![]);
        let s = trace(ModelRole::Student, "A. B", vec![]);
        let d = trace(ModelRole::Distilled, "A. B", vec![]);
        let err = join_traces(&[&t, &s, &d], &spans).unwrap_err();
        assert_eq!(err.to_string(), "text mismatch: teacher");

        let mut other = s.clone();
        other.response_id = "r2".into();
        assert!(matches!(
            join_traces(&[&t, &other], &spans),
            Err(Error::IdMismatch { .. })
        ));
    }

    #[test]
    fn missing_student_tokens_make_action_unscorable() {
        let text = "A. B";
        let spans = segment_text(text, &[]);
        let full = vec![tok("A.", -0.1, 0, 2), tok("B", -0.3, 3, 4)];
        let t = trace(ModelRole::Teacher, text, full.clone());
        let s = trace(ModelRole::Student, text, vec![tok("A.", -0.1, 0, 2)]);
        let d = trace(ModelRole::Distilled, text, full);
        let traj = join_traces(&[&d, &s, &t], &spans).unwrap();
        assert!(traj.actions[0].is_scorable());
        assert!(!traj.actions[1].is_scorable());
        assert_eq!(traj.unscorable_count(), 1);
    }

    #[test]
    fn join_without_distilled() {
        let text = "A. B";
        let spans = segment_text(text, &[]);
        let toks = vec![tok("A.", -0.1, 0, 2), tok("B", -0.3, 3, 4)];
        let t = trace(ModelRole::Teacher, text, toks.clone());
        let s = trace(ModelRole::Student, text, toks);
        let traj = join_traces(&[&s, &t], &spans).unwrap();
        assert!(!traj.has_distilled);
        assert!(traj.actions.iter().all(|a| a.probs.unwrap().distilled.is_none()));
        assert!(matches!(join_traces(&[&s], &spans), Err(Error::MissingRole { .. })));
    }

    fn corpus(responses: &[&str], roles: &[ModelRole]) -> Vec<ModelTrace> {
        let mut out = Vec::new();
        for r in responses {
            for role in roles {
                let mut t = trace(*role, "Hi", vec![tok("Hi", -0.1, 0, 2)]);
                t.response_id = r.to_string();
                out.push(t);
            }
        }
        out
    }

    #[test]
    fn validate_consistent_corpus() {
        let report = validate_corpus(&corpus(&["r1", "r2"], &ModelRole::ALL));
        assert_eq!(report.to_string(), "6 traces, 2 complete trajectories, 0 errors");
        assert!(report.is_clean());
    }

    #[test]
    fn validate_flags_incomplete_and_duplicates() {
        let mut traces = corpus(&["r1"], &ModelRole::ALL);
        traces.extend(corpus(&["r2"], &[ModelRole::Teacher, ModelRole::Student]));
        traces.push(traces[0].clone());
        let report = validate_corpus(&traces);
        assert_eq!(report.complete, 0);
        let kinds: Vec<&str> = report.errors.iter().map(|e| e.kind.as_str()).collect();
        assert_eq!(kinds, vec!["duplicate", "incomplete"]);
        assert_eq!(report.errors[1].key, "q1/r2");
        assert_eq!(report.errors[1].detail, "missing roles: distilled");
    }

    #[test]
    fn serialization_keeps_null_fields() {
        let t = trace(ModelRole::Distilled, "Hi", vec![tok("Hi", -0.5, 0, 2)]);
        let mut buf = Vec::new();
        write_traces(&mut buf, [&t]).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(
            line,
            "{\"question_id\":\"q1\",\"response_id\":\"r1\",\"model_role\":\"distilled\",\"model_name\":\"distilled-model\",\"text\":\"Hi\",\"tokens\":[{\"text\":\"Hi\",\"logprob\":-0.5,\"start\":0,\"end\":2}],\"correct\":null,\"domain_tag\":null}\n"
        );
    }
}
