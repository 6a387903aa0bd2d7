//! Sentence-level segmentation of responses into actions, and first-byte
//! alignment of model tokens to those actions.

use std::ops::Range;
use std::sync::LazyLock;

use aho_corasick::{AhoCorasick, MatchKind};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::trace::TokenScore;

pub const DEFAULT_SPECIAL_TOKENS: [&str; 2] = ["<think>", "</think>"];

/// Sentence-final punctuation, then whitespace, then an ASCII capital.
static BOUNDARY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"([.?!}\]])(\s+)([A-Z])").expect("boundary pattern"));

pub fn default_special_tokens() -> Vec<String> {
    DEFAULT_SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpan {
    /// 1-based position in the response.
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub is_special: bool,
}

impl ActionSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn text<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end]
    }
}

/// Byte ranges of special-token occurrences, leftmost first, longest literal
/// preferred at a given position.
fn special_ranges(text: &str, special_tokens: &[String]) -> Vec<Range<usize>> {
    let literals: Vec<&str> = special_tokens
        .iter()
        .map(String::as_str)
        .filter(|s| !s.is_empty())
        .collect();
    if literals.is_empty() {
        return Vec::new();
    }
    let matcher = AhoCorasick::builder()
        .match_kind(MatchKind::LeftmostLongest)
        .build(&literals)
        .expect("literal patterns always build");
    matcher.find_iter(text).map(|m| m.range()).collect()
}

fn split_sentences(text: &str, region: Range<usize>, out: &mut Vec<Range<usize>>) {
    let body = &text[region.clone()];
    let mut start = 0;
    for caps in BOUNDARY.captures_iter(body) {
        let cut = caps.get(3).expect("group 3 always participates").start();
        out.push(region.start + start..region.start + cut);
        start = cut;
    }
    out.push(region.start + start..region.end);
}

/// Splits `text` into actions. Each special-token occurrence is its own
/// action; the rest is cut before every capital letter that follows
/// sentence-final punctuation and whitespace, so the punctuation and the
/// whitespace stay with the preceding action. Whitespace-only pieces are
/// dropped.
pub fn segment_text(text: &str, special_tokens: &[String]) -> Vec<ActionSpan> {
    let mut pieces: Vec<(Range<usize>, bool)> = Vec::new();
    let mut cursor = 0;
    let mut sentences = Vec::new();
    for special in special_ranges(text, special_tokens) {
        if special.start > cursor {
            sentences.clear();
            split_sentences(text, cursor..special.start, &mut sentences);
            pieces.extend(sentences.drain(..).map(|r| (r, false)));
        }
        cursor = special.end;
        pieces.push((special, true));
    }
    if cursor < text.len() {
        split_sentences(text, cursor..text.len(), &mut sentences);
        pieces.extend(sentences.drain(..).map(|r| (r, false)));
    }
    pieces
        .into_iter()
        .filter(|(r, special)| *special || !text[r.clone()].trim().is_empty())
        .enumerate()
        .map(|(i, (r, is_special))| ActionSpan {
            index: i + 1,
            start: r.start,
            end: r.end,
            is_special,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    /// Token index range assigned to each span, parallel to the span list.
    pub ranges: Vec<Range<usize>>,
    /// Tokens whose first byte lies in no span.
    pub unassigned: usize,
}

/// Assigns each token to the span containing its first byte. Both inputs
/// must be sorted by start offset, so every span receives a contiguous run.
pub fn align_tokens(spans: &[ActionSpan], tokens: &[TokenScore]) -> Alignment {
    let mut ranges = vec![0..0; spans.len()];
    let mut unassigned = 0;
    let mut open: Option<(usize, usize)> = None; // (span, first token)
    for (ti, tok) in tokens.iter().enumerate() {
        let hit = spans.partition_point(|s| s.end <= tok.start);
        let span = (hit < spans.len() && spans[hit].start <= tok.start).then_some(hit);
        match (open, span) {
            (Some((si, _)), Some(sj)) if si == sj => {}
            (prev, next) => {
                if let Some((si, first)) = prev {
                    ranges[si] = first..ti;
                }
                open = next.map(|sj| (sj, ti));
                if next.is_none() {
                    unassigned += 1;
                }
            }
        }
    }
    if let Some((si, first)) = open {
        ranges[si] = first..tokens.len();
    }
    Alignment { ranges, unassigned }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(text: &str, specials: &[&str]) -> Vec<String> {
        let specials: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
        segment_text(text, &specials)
            .iter()
            .map(|s| s.text(text).to_string())
            .collect()
    }

    #[test]
    fn decimal_point_does_not_split() {
        assert_eq!(
            texts("We start. Then we add 3.5 to x. Done", &[]),
            vec!["We start. ", "Then we add 3.5 to x. ", "Done"]
        );
    }

    #[test]
    fn special_tokens_are_isolated() {
        assert_eq!(
            texts("<think>First step. Second", &["<think>"]),
            vec!["<think>", "First step. ", "Second"]
        );
        let spans = segment_text("<think>First step. Second", &default_special_tokens());
        assert!(spans[0].is_special);
        assert!(!spans[1].is_special);
    }

    #[test]
    fn no_boundary_is_identity() {
        assert_eq!(texts("no boundaries here", &[]), vec!["no boundaries here"]);
        assert!(segment_text("", &[]).is_empty());
        assert!(segment_text("  \n ", &[]).is_empty());
    }

    #[test]
    fn full_punctuation_class() {
        assert_eq!(
            texts("f(x)} Then done? Yes! Sure.", &[]),
            vec!["f(x)} ", "Then done? ", "Yes! ", "Sure."]
        );
        assert_eq!(texts("see [1]\n\nNext", &[]), vec!["see [1]\n\n", "Next"]);
    }

    #[test]
    fn non_ascii_capital_does_not_split() {
        assert_eq!(texts("Fin. Élan", &[]), vec!["Fin. Élan"]);
        assert_eq!(texts("x. y", &[]), vec!["x. y"]);
    }

    #[test]
    fn whitespace_between_specials_is_dropped() {
        let text = "<think>\n</think>\n\nAnswer. Yes";
        let spans = segment_text(text, &default_special_tokens());
        let got: Vec<&str> = spans.iter().map(|s| s.text(text)).collect();
        assert_eq!(got, vec!["<think>", "</think>", "\n\nAnswer. ", "Yes"]);
        assert_eq!(spans.iter().map(|s| s.index).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    fn tok(start: usize, end: usize) -> TokenScore {
        TokenScore {
            text: String::new(),
            logprob: -1.0,
            start,
            end,
        }
    }

    fn span(index: usize, start: usize, end: usize) -> ActionSpan {
        ActionSpan {
            index,
            start,
            end,
            is_special: false,
        }
    }

    #[test]
    fn first_byte_rule() {
        let spans = [span(1, 0, 3), span(2, 3, 8)];
        let a = align_tokens(&spans, &[tok(0, 4)]);
        assert_eq!(a.ranges, vec![0..1, 0..0]);
        let a = align_tokens(&spans, &[tok(3, 8)]);
        assert_eq!(a.ranges, vec![0..0, 0..1]);
        assert_eq!(a.unassigned, 0);
    }

    #[test]
    fn token_in_dropped_gap_is_unassigned() {
        // "<think>" then whitespace gap [7,9) then "Hi" at [9,11)
        let spans = [
            ActionSpan {
                index: 1,
                start: 0,
                end: 7,
                is_special: true,
            },
            ActionSpan {
                index: 2,
                start: 9,
                end: 11,
                is_special: true,
            },
        ];
        let a = align_tokens(&spans, &[tok(0, 7), tok(7, 9), tok(9, 11)]);
        assert_eq!(a.ranges, vec![0..1, 2..3]);
        assert_eq!(a.unassigned, 1);
    }

    fn arb_text() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop_oneof![
                Just("We".to_string()),
                Just("x".to_string()),
                Just(". ".to_string()),
                Just("? ".to_string()),
                Just("!\n".to_string()),
                Just("} ".to_string()),
                Just("]".to_string()),
                Just(" ".to_string()),
                Just("  \n".to_string()),
                Just("A".to_string()),
                Just("é".to_string()),
                Just("3.5".to_string()),
                Just("<think>".to_string()),
                Just("</think>".to_string()),
            ],
            0..40,
        )
        .prop_map(|parts| parts.concat())
    }

    proptest! {
        #[test]
        fn spans_and_gaps_reconstruct_text(text in arb_text()) {
            let spans = segment_text(&text, &default_special_tokens());
            let mut rebuilt = String::new();
            let mut cursor = 0;
            for s in &spans {
                prop_assert!(s.start >= cursor && s.end > s.start);
                let gap = &text[cursor..s.start];
                prop_assert!(gap.trim().is_empty());
                rebuilt.push_str(gap);
                rebuilt.push_str(s.text(&text));
                cursor = s.end;
            }
            prop_assert!(text[cursor..].trim().is_empty());
            rebuilt.push_str(&text[cursor..]);
            prop_assert_eq!(rebuilt, text);
        }

        #[test]
        fn resegmenting_spans_is_idempotent(text in arb_text()) {
            let specials = default_special_tokens();
            let spans = segment_text(&text, &specials);
            let joined: String = spans.iter().map(|s| s.text(&text)).collect();
            let again = segment_text(&joined, &specials);
            let a: Vec<&str> = spans.iter().map(|s| s.text(&text)).collect();
            let b: Vec<&str> = again.iter().map(|s| s.text(&joined)).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn lowercase_after_period_never_splits(x in "[a-z ]{0,12}", y in "[a-z][a-z ]{0,12}") {
            let text = format!("{x}. {y}");
            prop_assert_eq!(segment_text(&text, &[]).len(), 1);
        }

        #[test]
        fn every_token_assigned_at_most_once(
            text in arb_text(),
            cuts in prop::collection::btree_set(0usize..200, 0..30),
        ) {
            let spans = segment_text(&text, &default_special_tokens());
            let len = text.len();
            let bounds: Vec<usize> = cuts.into_iter().filter(|c| *c < len).chain(std::iter::once(len)).collect();
            let mut tokens = Vec::new();
            let mut prev = None;
            for b in bounds {
                if let Some(p) = prev {
                    if b > p { tokens.push(tok(p, b)); }
                }
                prev = Some(b);
            }
            let a = align_tokens(&spans, &tokens);
            let assigned: usize = a.ranges.iter().map(|r| r.len()).sum();
            prop_assert_eq!(assigned + a.unassigned, tokens.len());
            for (s, r) in spans.iter().zip(&a.ranges) {
                for t in &tokens[r.clone()] {
                    prop_assert!(s.start <= t.start && t.start < s.end);
                }
            }
        }
    }
}
