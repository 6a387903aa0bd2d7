use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::ScoringError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WirePreset {
    #[default]
    CompletionsEcho,
    PromptLogprobs,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetUnit {
    #[default]
    Bytes,
    Chars,
}

/// Where to find token data in a backend response. Paths are dot-separated
/// keys with numeric array indices, e.g. `choices.0.logprobs.tokens`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMap {
    pub tokens: String,
    pub logprobs: String,
    #[serde(default)]
    pub offsets: Option<String>,
    #[serde(default)]
    pub offset_unit: OffsetUnit,
    /// Number of leading tokens that belong to the prompt.
    #[serde(default)]
    pub prompt_tokens: Option<String>,
    /// Whether the returned tokens start with the prompt.
    #[serde(default)]
    pub covers_prompt: bool,
}

impl WirePreset {
    pub fn request_template(self) -> Value {
        match self {
            WirePreset::CompletionsEcho => json!({
                "model": "$model",
                "prompt": "$full_text",
                "max_tokens": 0,
                "echo": true,
                "logprobs": 0,
                "temperature": 0
            }),
            WirePreset::PromptLogprobs => json!({
                "model": "$model",
                "prompt": "$prompt",
                "continuation": "$response"
            }),
        }
    }

    pub fn response_map(self) -> ResponseMap {
        match self {
            WirePreset::CompletionsEcho => ResponseMap {
                tokens: "choices.0.logprobs.tokens".into(),
                logprobs: "choices.0.logprobs.token_logprobs".into(),
                offsets: Some("choices.0.logprobs.text_offset".into()),
                offset_unit: OffsetUnit::Chars,
                prompt_tokens: None,
                covers_prompt: true,
            },
            WirePreset::PromptLogprobs => ResponseMap {
                tokens: "tokens".into(),
                logprobs: "logprobs".into(),
                offsets: None,
                offset_unit: OffsetUnit::Bytes,
                prompt_tokens: None,
                covers_prompt: false,
            },
        }
    }
}

pub(crate) fn fill_template(template: &Value, model: &str, prompt: &str, response: &str) -> Value {
    match template {
        Value::String(s) => match s.as_str() {
            "$model" => Value::String(model.into()),
            "$prompt" => Value::String(prompt.into()),
            "$response" => Value::String(response.into()),
            "$full_text" => Value::String(format!("{prompt}{response}")),
            _ => template.clone(),
        },
        Value::Array(items) => Value::Array(
            items
                .iter()
                .map(|v| fill_template(v, model, prompt, response))
                .collect(),
        ),
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| (k.clone(), fill_template(v, model, prompt, response)))
                .collect(),
        ),
        other => other.clone(),
    }
}

pub(crate) fn lookup<'a>(root: &'a Value, path: &str) -> Result<&'a Value, ScoringError> {
    let mut cur = root;
    for part in path.split('.').filter(|p| !p.is_empty()) {
        cur = match cur {
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get(i)),
            Value::Object(map) => map.get(part),
            _ => None,
        }
        .ok_or_else(|| ScoringError::Schema(format!("path {path:?} not found")))?;
    }
    Ok(cur)
}

/// Raw token data pulled out of a backend response.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RawTokens {
    pub texts: Vec<String>,
    /// `None` where the backend reports no logprob (typically the first
    /// prompt token).
    pub logprobs: Vec<Option<f64>>,
    pub offsets: Option<Vec<usize>>,
    pub prompt_tokens: Option<usize>,
}

pub(crate) fn extract(body: &Value, map: &ResponseMap) -> Result<RawTokens, ScoringError> {
    let array = |path: &str| -> Result<&Vec<Value>, ScoringError> {
        lookup(body, path)?
            .as_array()
            .ok_or_else(|| ScoringError::Schema(format!("path {path:?} is not an array")))
    };
    let texts = array(&map.tokens)?
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| ScoringError::Schema("token text is not a string".into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let logprobs = array(&map.logprobs)?
        .iter()
        .map(|v| match v {
            Value::Null => Ok(None),
            other => other
                .as_f64()
                .map(Some)
                .ok_or_else(|| ScoringError::Schema("logprob is not a number".into())),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if texts.len() != logprobs.len() {
        return Err(ScoringError::Schema(format!(
            "{} token texts but {} logprobs",
            texts.len(),
            logprobs.len()
        )));
    }
    let offsets = match &map.offsets {
        None => None,
        Some(path) => match lookup(body, path) {
            Ok(v) => {
                let items = v
                    .as_array()
                    .ok_or_else(|| ScoringError::Schema(format!("path {path:?} is not an array")))?;
                let offs = items
                    .iter()
                    .map(|o| {
                        o.as_u64()
                            .map(|x| x as usize)
                            .ok_or_else(|| ScoringError::Schema("offset is not an integer".into()))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if offs.len() != texts.len() {
                    return Err(ScoringError::Schema("offset count differs from token count".into()));
                }
                Some(offs)
            }
            // offsets are optional on the wire even when mapped
            Err(_) => None,
        },
    };
    let prompt_tokens = match &map.prompt_tokens {
        None => None,
        Some(path) => Some(
            lookup(body, path)?
                .as_u64()
                .ok_or_else(|| ScoringError::Schema("prompt token count is not an integer".into()))?
                as usize,
        ),
    };
    Ok(RawTokens {
        texts,
        logprobs,
        offsets,
        prompt_tokens,
    })
}
