//! A local scoring backend speaking the `prompt-logprobs` wire shape, with
//! knobs for latency, transient failures, permanent failures and auth.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use dspt_core::scoring::{BackendConfig, ScoreJob, Secret, WirePreset};
use serde_json::{json, Value};

#[derive(Default)]
pub struct MockState {
    pub delay_ms: u64,
    /// Transient failures served for each distinct request before it succeeds.
    pub transient: u32,
    pub transient_status: u16,
    pub required_token: Option<String>,
    /// "model|continuation" keys that always fail with 503.
    pub always_fail: Mutex<HashSet<String>>,
    pub in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
    pub requests: AtomicUsize,
    pub seen: Mutex<HashMap<String, u32>>,
}

pub struct Mock {
    pub addr: SocketAddr,
    pub state: Arc<MockState>,
}

impl Mock {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn config(&self, model: &str, max_in_flight: usize) -> BackendConfig {
        let mut cfg = BackendConfig::new(self.url(), model);
        cfg.path_template = "/score/{model}".into();
        cfg.preset = WirePreset::PromptLogprobs;
        cfg.max_in_flight = max_in_flight;
        cfg.backoff_base_ms = 2;
        cfg.backoff_max_ms = 20;
        cfg.timeout_ms = 10_000;
        if let Some(t) = &self.state.required_token {
            cfg.auth_token = Some(Secret::new(t.clone()));
        }
        cfg
    }

    pub fn requests(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }
}

/// Tokens of the mock tokenizer: words with their trailing space.
pub fn mock_tokens(text: &str) -> Vec<String> {
    text.split_inclusive(' ').map(str::to_string).collect()
}

/// Deterministic per-token logprob the mock reports.
pub fn mock_logprob(model: &str, token: &str) -> f64 {
    let h = token
        .bytes()
        .chain(model.bytes())
        .fold(7u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
    -((h % 1000) as f64 + 1.0) / 500.0
}

async fn handle(State(state): State<Arc<MockState>>, headers: HeaderMap, Json(body): Json<Value>) -> Response {
    state.requests.fetch_add(1, Ordering::SeqCst);
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(now, Ordering::SeqCst);
    if state.delay_ms > 0 {
        tokio::time::sleep(Duration::from_millis(state.delay_ms)).await;
    }
    let response = respond(&state, &headers, &body);
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    response
}

fn respond(state: &MockState, headers: &HeaderMap, body: &Value) -> Response {
    if let Some(token) = &state.required_token {
        let expected = format!("Bearer {token}");
        if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some(expected.as_str()) {
            return StatusCode::UNAUTHORIZED.into_response();
        }
    }
    let model = body["model"].as_str().unwrap_or_default().to_string();
    let continuation = body["continuation"].as_str().unwrap_or_default().to_string();
    let key = format!("{model}|{continuation}");
    if state.always_fail.lock().unwrap().contains(&key) {
        return StatusCode::SERVICE_UNAVAILABLE.into_response();
    }
    {
        let mut seen = state.seen.lock().unwrap();
        let n = seen.entry(key).or_default();
        if *n < state.transient {
            *n += 1;
            return StatusCode::from_u16(state.transient_status).unwrap().into_response();
        }
    }
    let tokens = mock_tokens(&continuation);
    let logprobs: Vec<f64> = tokens.iter().map(|t| mock_logprob(&model, t)).collect();
    Json(json!({"tokens": tokens, "logprobs": logprobs})).into_response()
}

pub async fn spawn(state: MockState) -> Mock {
    let state = Arc::new(MockState {
        transient_status: if state.transient_status == 0 {
            429
        } else {
            state.transient_status
        },
        ..state
    });
    let app = Router::new().fallback(handle).with_state(Arc::clone(&state));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    Mock { addr, state }
}

pub fn job(q: &str, r: &str, text: &str) -> ScoreJob {
    ScoreJob {
        question_id: q.into(),
        response_id: r.into(),
        prompt: format!("Question {q}: "),
        response_text: text.into(),
        correct: Some(r.ends_with('0')),
        domain_tag: None,
    }
}
