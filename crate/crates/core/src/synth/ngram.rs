use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::trace::{ModelRole, ModelTrace, TokenScore};

/// Reserved unit that every out-of-vocabulary word maps to.
pub const UNK: &str = "<unk>";
const BOS: u32 = u32::MAX;

/// Anything that assigns a conditional probability to the next word given
/// the words before it.
pub trait UnitModel: Sync {
    fn order(&self) -> usize;
    fn prob(&self, history: &[&str], word: &str) -> f64;
}

/// Word-level n-gram model with add-k smoothing.
#[derive(Debug, Clone)]
pub struct NGramModel {
    n: usize,
    k: f64,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    unk: Option<u32>,
    /// context ids (length n-1, BOS-padded) -> (next id -> count, total)
    counts: HashMap<Vec<u32>, (HashMap<u32, u64>, u64)>,
}

/// Fits an n-gram model over the sentences read as one continuous word
/// stream, with a reserved `<unk>` unit.
pub fn fit_ngram(corpus: &[String], n: usize, k: f64) -> Result<NGramModel> {
    NGramModel::fit(corpus, n, k, true)
}

impl NGramModel {
    pub fn fit(corpus: &[String], n: usize, k: f64, reserve_unk: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::NGram("order must be at least 1".into()));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::NGram(format!("smoothing k must be positive, got {k}")));
        }
        let words: Vec<&str> = corpus.iter().flat_map(|s| s.split_whitespace()).collect();
        if words.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut vocab: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        vocab.sort();
        vocab.dedup();
        if reserve_unk && !vocab.iter().any(|w| w == UNK) {
            vocab.push(UNK.to_string());
        }
        let index: HashMap<String, u32> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let unk = index.get(UNK).copied();

        let mut stream = vec![BOS; n - 1];
        stream.extend(words.iter().map(|w| index[*w]));
        let mut counts: HashMap<Vec<u32>, (HashMap<u32, u64>, u64)> = HashMap::new();
        for window in stream.windows(n) {
            let (ctx, next) = window.split_at(n - 1);
            let entry = counts.entry(ctx.to_vec()).or_default();
            *entry.0.entry(next[0]).or_default() += 1;
            entry.1 += 1;
        }
        Ok(NGramModel {
            n,
            k,
            vocab,
            index,
            unk,
            counts,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn smoothing(&self) -> f64 {
        self.k
    }

    fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied().or(self.unk)
    }

    fn context_ids(&self, history: &[&str]) -> Vec<u32> {
        let want = self.n - 1;
        let tail = &history[history.len().saturating_sub(want)..];
        let mut ctx = vec![BOS; want - tail.len()];
        // without a reserved unit an unknown context word can match nothing
        ctx.extend(tail.iter().map(|w| self.id(w).unwrap_or(BOS - 1)));
        ctx
    }

    fn prob_ids(&self, ctx: &[u32], next: Option<u32>) -> f64 {
        let v = self.vocab.len() as f64;
        match self.counts.get(ctx) {
            None => 1.0 / v,
            Some((nexts, total)) => {
                let c = next.and_then(|id| nexts.get(&id)).copied().unwrap_or(0) as f64;
                (c + self.k) / (*total as f64 + self.k * v)
            }
        }
    }

    /// Full conditional distribution over the vocabulary for one context.
    pub fn distribution(&self, history: &[&str]) -> Vec<(&str, f64)> {
        let ctx = self.context_ids(history);
        self.vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), self.prob_ids(&ctx, Some(i as u32))))
            .collect()
    }

    /// Contexts seen during fitting, as word lists (`<s>` for padding).
    pub fn observed_contexts(&self) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = self
            .counts
            .keys()
            .map(|ctx| {
                ctx.iter()
                    .map(|&id| {
                        if id == BOS {
                            "<s>".to_string()
                        } else {
                            self.vocab[id as usize].clone()
                        }
                    })
                    .collect()
            })
            .collect();
        out.sort();
        out
    }

    /// Draws the next word given a history.
    pub fn sample_next<R: Rng + ?Sized>(&self, history: &[&str], rng: &mut R) -> &str {
        let dist = self.distribution(history);
        let mut u: f64 = rng.random();
        for (w, p) in &dist {
            if u < *p {
                return w;
            }
            u -= p;
        }
        dist.last().map(|(w, _)| *w).expect("vocabulary is nonempty")
    }

    /// Unigram frequencies with add-k smoothing over `support`.
    pub fn unigram(&self, support: &[String]) -> BTreeMap<String, f64> {
        let mut freq: HashMap<u32, u64> = HashMap::new();
        for (nexts, _) in self.counts.values() {
            for (&id, &c) in nexts {
                *freq.entry(id).or_default() += c;
            }
        }
        let total: u64 = freq.values().sum();
        let denom = total as f64 + self.k * support.len() as f64;
        support
            .iter()
            .map(|w| {
                let c = self.index.get(w).and_then(|id| freq.get(id)).copied().unwrap_or(0) as f64;
                (w.clone(), (c + self.k) / denom)
            })
            .collect()
    }
}

impl UnitModel for NGramModel {
    fn order(&self) -> usize {
        self.n
    }

    fn prob(&self, history: &[&str], word: &str) -> f64 {
        self.prob_ids(&self.context_ids(history), self.id(word))
    }
}

/// Per-unit mixture `lambda * P_a + (1 - lambda) * P_b`.
pub struct Mixture<'a, A: UnitModel, B: UnitModel> {
    pub a: &'a A,
    pub b: &'a B,
    pub lambda: f64,
}

impl<A: UnitModel, B: UnitModel> UnitModel for Mixture<'_, A, B> {
    fn order(&self) -> usize {
        self.a.order().max(self.b.order())
    }

    fn prob(&self, history: &[&str], word: &str) -> f64 {
        self.lambda * self.a.prob(history, word) + (1.0 - self.lambda) * self.b.prob(history, word)
    }
}

/// Whitespace-separated words of `text` with their byte ranges.
pub fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let base = text.as_ptr() as usize;
    text.split_whitespace()
        .map(|w| {
            let start = w.as_ptr() as usize - base;
            (start, start + w.len())
        })
        .collect()
}

/// Exact per-word log-probabilities of `text`, one token per word.
pub fn score_with<M: UnitModel + ?Sized>(model: &M, text: &str) -> Vec<TokenScore> {
    let spans = word_spans(text);
    let words: Vec<&str> = spans.iter().map(|&(s, e)| &text[s..e]).collect();
    let keep = model.order().saturating_sub(1);
    spans
        .iter()
        .enumerate()
        .map(|(i, &(start, end))| {
            let history = &words[i.saturating_sub(keep)..i];
            TokenScore {
                text: words[i].to_string(),
                logprob: model.prob(history, words[i]).ln().min(0.0),
                start,
                end,
            }
        })
        .collect()
}

/// Scores a text under one model and wraps the result as a trace record.
pub fn score_with_ngram<M: UnitModel + ?Sized>(
    model: &M,
    text: &str,
    question_id: &str,
    response_id: &str,
    role: ModelRole,
    model_name: &str,
) -> ModelTrace {
    ModelTrace {
        question_id: question_id.into(),
        response_id: response_id.into(),
        model_role: role,
        model_name: model_name.into(),
        text: text.into(),
        tokens: score_with(model, text),
        correct: None,
        domain_tag: None,
    }
}

/// Symmetric KL divergence between two models' smoothed unigram
/// distributions over the union of their vocabularies.
pub fn unigram_symmetric_kl(a: &NGramModel, b: &NGramModel) -> f64 {
    let mut support: Vec<String> = a.vocab.iter().chain(b.vocab.iter()).cloned().collect();
    support.sort();
    support.dedup();
    let pa = a.unigram(&support);
    let pb = b.unigram(&support);
    support
        .iter()
        .map(|w| {
            let (x, y) = (pa[w], pb[w]);
            x * (x / y).ln() + y * (y / x).ln()
        })
        .sum()
}
