use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde_json::Value;
use tokio::sync::Semaphore;

use super::corpus::ScoreJob;
use super::wire::{extract, fill_template, OffsetUnit, RawTokens, ResponseMap};
use super::{BackendConfig, ScoringError};
use crate::trace::{ModelRole, ModelTrace, TokenScore};

/// A scoring endpoint with its own in-flight limit.
#[derive(Debug)]
pub struct Backend {
    cfg: BackendConfig,
    endpoint: url::Url,
    http: reqwest::Client,
    in_flight: Semaphore,
    template: Value,
    map: ResponseMap,
    token: Option<String>,
    requests: AtomicU64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub trace: ModelTrace,
    pub attempts: u32,
}

enum Failure {
    Retry { status: Option<u16>, detail: String },
    Fatal(ScoringError),
}

impl Backend {
    pub fn new(cfg: BackendConfig) -> Result<Arc<Self>, ScoringError> {
        cfg.validate()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| ScoringError::Config(e.to_string()))?;
        Ok(Arc::new(Self {
            endpoint: cfg.endpoint()?,
            in_flight: Semaphore::new(cfg.max_in_flight),
            template: cfg
                .request_template
                .clone()
                .unwrap_or_else(|| cfg.preset.request_template()),
            map: cfg.response_map.clone().unwrap_or_else(|| cfg.preset.response_map()),
            token: cfg.resolved_token(),
            requests: AtomicU64::new(0),
            http,
            cfg,
        }))
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    /// HTTP requests sent so far, retries included.
    pub fn requests_sent(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    async fn send_once(&self, body: &Value) -> Result<Value, Failure> {
        let _permit = self.in_flight.acquire().await.expect("semaphore is never closed");
        self.requests.fetch_add(1, Ordering::SeqCst);
        let mut req = self.http.post(self.endpoint.clone()).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) => {
                return Err(Failure::Retry {
                    status: None,
                    detail: format!("transport: {e}"),
                })
            }
        };
        let status = resp.status().as_u16();
        match status {
            200..=299 => resp
                .json::<Value>()
                .await
                .map_err(|e| Failure::Fatal(ScoringError::Schema(format!("response body: {e}")))),
            401 | 403 => Err(Failure::Fatal(ScoringError::Auth(status))),
            429 | 500..=599 => Err(Failure::Retry {
                status: Some(status),
                detail: format!("HTTP {status}"),
            }),
            _ => {
                let detail = resp.text().await.unwrap_or_default();
                Err(Failure::Fatal(ScoringError::Http {
                    status,
                    detail: detail.chars().take(200).collect(),
                }))
            }
        }
    }

    async fn request(&self, body: &Value) -> Result<(Value, u32), ScoringError> {
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.send_once(body).await {
                Ok(v) => return Ok((v, attempt)),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry { status, detail }) => {
                    if attempt > self.cfg.max_retries {
                        return Err(ScoringError::RetriesExhausted {
                            attempts: attempt,
                            last: detail,
                            last_status: status,
                        });
                    }
                    let ceiling = self.cfg.backoff_ceiling(attempt).as_millis() as u64;
                    let delay = rand::rng().random_range(0..=ceiling);
                    log::debug!("{}: {detail}, retry {attempt} in {delay} ms", self.cfg.model_name);
                    tokio::time::sleep(Duration::from_millis(delay)).await;
                }
            }
        }
    }

    /// Scores `job.response_text` conditioned on `job.prompt`. The returned
    /// trace covers the response only.
    pub async fn score_text(&self, role: ModelRole, job: &ScoreJob) -> Result<Scored, ScoringError> {
        let body = fill_template(&self.template, &self.cfg.model_name, &job.prompt, &job.response_text);
        let (reply, attempts) = self.request(&body).await?;
        let raw = extract(&reply, &self.map)?;
        let tokens = response_tokens(&raw, &self.map, &job.prompt, &job.response_text)?;
        let mut trace = ModelTrace {
            question_id: job.question_id.clone(),
            response_id: job.response_id.clone(),
            model_role: role,
            model_name: self.cfg.model_name.clone(),
            text: job.response_text.clone(),
            tokens,
            correct: job.correct,
            domain_tag: job.domain_tag.clone(),
        };
        trace.normalize().map_err(|v| ScoringError::InvalidTrace(v.detail))?;
        Ok(Scored { trace, attempts })
    }
}

/// Byte spans of `tokens` laid end to end over `text`, matched left to
/// right. Every byte of `text` must be covered.
pub fn reconstruct_offsets(tokens: &[String], text: &str) -> Result<Vec<(usize, usize)>, ScoringError> {
    let mut cursor = 0;
    let mut out = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        if tok.is_empty() || !text[cursor..].starts_with(tok.as_str()) {
            return Err(ScoringError::Reconstruction(i));
        }
        out.push((cursor, cursor + tok.len()));
        cursor += tok.len();
    }
    if cursor != text.len() {
        return Err(ScoringError::Reconstruction(tokens.len()));
    }
    Ok(out)
}

/// Checks reported start offsets against the token texts.
fn verify_offsets(
    tokens: &[String],
    starts: &[usize],
    unit: OffsetUnit,
    text: &str,
) -> Result<Vec<(usize, usize)>, ScoringError> {
    let char_starts: Vec<usize> = match unit {
        OffsetUnit::Bytes => Vec::new(),
        OffsetUnit::Chars => text
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(text.len()))
            .collect(),
    };
    let mut prev_end = 0;
    let mut out = Vec::with_capacity(tokens.len());
    for (i, (tok, &s)) in tokens.iter().zip(starts).enumerate() {
        let start = match unit {
            OffsetUnit::Bytes => s,
            OffsetUnit::Chars => *char_starts.get(s).ok_or(ScoringError::Reconstruction(i))?,
        };
        let end = start + tok.len();
        if tok.is_empty()
            || start < prev_end
            || end > text.len()
            || !text.is_char_boundary(start)
            || !text[start..].starts_with(tok.as_str())
        {
            return Err(ScoringError::Reconstruction(i));
        }
        out.push((start, end));
        prev_end = end;
    }
    Ok(out)
}

fn response_tokens(
    raw: &RawTokens,
    map: &ResponseMap,
    prompt: &str,
    response: &str,
) -> Result<Vec<TokenScore>, ScoringError> {
    let (first, spans): (usize, Vec<(usize, usize)>) = if !map.covers_prompt {
        let spans = match &raw.offsets {
            Some(starts) => verify_offsets(&raw.texts, starts, map.offset_unit, response)?,
            None => reconstruct_offsets(&raw.texts, response)?,
        };
        (0, spans)
    } else if let Some(n) = raw.prompt_tokens {
        if n > raw.texts.len() {
            return Err(ScoringError::Schema(format!(
                "prompt token count {n} exceeds token count"
            )));
        }
        let spans = reconstruct_offsets(&raw.texts[n..], response).map_err(|e| match e {
            ScoringError::Reconstruction(i) => ScoringError::Reconstruction(i + n),
            other => other,
        })?;
        (n, spans)
    } else {
        let full = format!("{prompt}{response}");
        let all = match &raw.offsets {
            Some(starts) => verify_offsets(&raw.texts, starts, map.offset_unit, &full)?,
            None => reconstruct_offsets(&raw.texts, &full)?,
        };
        let plen = prompt.len();
        let first = all.iter().position(|&(s, _)| s >= plen).unwrap_or(all.len());
        if let Some(i) = all[..first].iter().position(|&(_, e)| e > plen) {
            return Err(ScoringError::PromptBoundary(i));
        }
        let spans = all[first..].iter().map(|&(s, e)| (s - plen, e - plen)).collect();
        (first, spans)
    };
    spans
        .into_iter()
        .enumerate()
        .map(|(k, (start, end))| {
            let i = first + k;
            let logprob = raw.logprobs[i].ok_or_else(|| ScoringError::Schema(format!("token {i} has no logprob")))?;
            Ok(TokenScore {
                text: raw.texts[i].clone(),
                logprob,
                start,
                end,
            })
        })
        .collect()
}
