//! Teacher-forced scoring against remote backends that report per-token
//! log-probabilities for a supplied text.
//!
//! Requests are built from a JSON template and responses are read through
//! configurable field paths, so one client serves differently shaped
//! backends. Two presets ship: `completions-echo` (prompt and response sent
//! as one string, every token echoed back with character offsets) and
//! `prompt-logprobs` (prompt and continuation sent separately, logprobs
//! returned for the continuation only).

mod client;
mod corpus;
mod wire;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{reconstruct_offsets, Backend, Scored};
pub use corpus::{
    read_jobs, score_corpus, CorpusPaths, CorpusSummary, ErrorRecord, ScoreJob, DEFAULT_MAX_FAILURE_RATE,
};
pub use wire::{OffsetUnit, ResponseMap, WirePreset};

/// Environment variable consulted when a backend has no configured token.
pub const API_KEY_ENV: &str = "DSPT_API_KEY";

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),

    #[error("HTTP {status}: {detail}")]
    Http { status: u16, detail: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: String,
        last_status: Option<u16>,
    },

    #[error("offset reconstruction failed at token {0}")]
    Reconstruction(usize),

    #[error("token {0} straddles the prompt/response boundary")]
    PromptBoundary(usize),

    #[error("malformed backend response: {0}")]
    Schema(String),

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("backend config: {0}")]
    Config(String),

    #[error("{failed} of {total} scoring calls failed, above the {rate} failure-rate limit")]
    FailureRate { failed: usize, total: usize, rate: f64 },
}

impl ScoringError {
    /// HTTP status associated with the failure, if any.
    pub fn status(&self) -> Option<u16> {
        match self {
            ScoringError::Auth(s) | ScoringError::Http { status: s, .. } => Some(*s),
            ScoringError::RetriesExhausted { last_status, .. } => *last_status,
            _ => None,
        }
    }
}

/// A credential that never appears in Debug output or serialized configs.
#[derive(Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(transparent)]
pub struct Secret(String);

impl Secret {
    pub fn new(s: impl Into<String>) -> Self {
        Secret(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

fn default_path_template() -> String {
    "/v1/completions".into()
}
fn default_max_in_flight() -> usize {
    4
}
fn default_timeout_ms() -> u64 {
    120_000
}
fn default_max_retries() -> u32 {
    5
}
fn default_backoff_base_ms() -> u64 {
    500
}
fn default_backoff_max_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    /// Appended to `base_url`; `{model}` is replaced with the model name.
    #[serde(default = "default_path_template")]
    pub path_template: String,
    #[serde(default, skip_serializing)]
    pub auth_token: Option<Secret>,
    pub model_name: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_max_ms")]
    pub backoff_max_ms: u64,
    #[serde(default)]
    pub preset: WirePreset,
    /// Overrides the preset's request body. String leaves equal to `$model`,
    /// `$prompt`, `$response` or `$full_text` are substituted.
    #[serde(default)]
    pub request_template: Option<serde_json::Value>,
    /// Overrides the preset's response field paths.
    #[serde(default)]
    pub response_map: Option<ResponseMap>,
}

impl BackendConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            path_template: default_path_template(),
            auth_token: None,
            model_name: model_name.into(),
            max_in_flight: default_max_in_flight(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_base_ms(),
            backoff_max_ms: default_backoff_max_ms(),
            preset: WirePreset::default(),
            request_template: None,
            response_map: None,
        }
    }

    pub fn endpoint(&self) -> Result<url::Url, ScoringError> {
        let base = url::Url::parse(&self.base_url)
            .map_err(|e| ScoringError::Config(format!("base_url {:?}: {e}", self.base_url)))?;
        if !matches!(base.scheme(), "http" | "https") {
            return Err(ScoringError::Config(format!(
                "base_url must be http(s), got {:?}",
                self.base_url
            )));
        }
        let path = self.path_template.replace("{model}", &self.model_name);
        let joined = format!(
            "{}/{}",
            base.as_str().trim_end_matches('/'),
            path.trim_start_matches('/')
        );
        url::Url::parse(&joined).map_err(|e| ScoringError::Config(format!("endpoint {joined:?}: {e}")))
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        self.endpoint()?;
        if self.max_in_flight == 0 {
            return Err(ScoringError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    /// Upper bound of the delay before retry `attempt` (1-based), before
    /// jitter: base * 2^(attempt-1), capped.
    pub fn backoff_ceiling(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(self.backoff_max_ms))
    }

    pub(crate) fn resolved_token(&self) -> Option<String> {
        self.auth_token
            .as_ref()
            .map(|s| s.expose().to_string())
            .or_else(|| std::env::var(API_KEY_ENV).ok())
            .filter(|s| !s.is_empty())
    }
}
