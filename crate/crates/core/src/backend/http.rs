//! Thin adapters for generic chat-completion HTTP APIs.

use std::time::{Duration, Instant};

use reqwest::blocking::{Client, RequestBuilder};
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{BackendError, CompletionRequest, CompletionResponse, FinishReason, Role, Transport, Usage};

const ANTHROPIC_VERSION: &str = "2023-06-01";
const ANTHROPIC_DEFAULT_MAX_TOKENS: u32 = 4096;

fn client(timeout: Duration) -> Result<Client, String> {
    Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| e.to_string())
}

fn send_json(builder: RequestBuilder, body: &Value) -> Result<(Value, Duration), BackendError> {
    let started = Instant::now();
    let resp = builder.json(body).send().map_err(|e| {
        if e.is_timeout() {
            BackendError::Timeout
        } else {
            BackendError::Transport(e.to_string())
        }
    })?;
    let status = resp.status();
    let text = resp.text().map_err(|e| {
        if e.is_timeout() {
            BackendError::Timeout
        } else {
            BackendError::Transport(e.to_string())
        }
    })?;
    if !status.is_success() {
        return Err(status_error(status, text));
    }
    let value = serde_json::from_str(&text)
        .map_err(|e| BackendError::MalformedResponse(format!("{e}: {}", truncate(&text))))?;
    Ok((value, started.elapsed()))
}

fn truncate(s: &str) -> String {
    s.chars().take(200).collect()
}

fn status_error(status: StatusCode, body: String) -> BackendError {
    match status.as_u16() {
        401 | 403 => BackendError::Authentication(truncate(&body)),
        429 => BackendError::RateLimited(truncate(&body)),
        408 | 500..=599 => BackendError::Server {
            status: status.as_u16(),
            body: truncate(&body),
        },
        code => BackendError::InvalidRequest(format!("HTTP {code}: {}", truncate(&body))),
    }
}

fn usage(v: &Value, prompt: &str, completion: &str) -> Option<Usage> {
    Some(Usage {
        prompt_tokens: v.get(prompt)?.as_u64()?,
        completion_tokens: v.get(completion)?.as_u64()?,
    })
}

/// `POST {endpoint}` with an OpenAI-style `messages` body.
pub struct OpenAiCompatible {
    endpoint: String,
    api_key: String,
    client: Client,
}

impl OpenAiCompatible {
    pub fn new(endpoint: String, api_key: String, timeout: Duration) -> Result<Self, String> {
        Ok(Self {
            endpoint,
            api_key,
            client: client(timeout)?,
        })
    }

    pub fn body(request: &CompletionRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": request.model,
            "messages": messages,
            "temperature": request.params.temperature,
            "top_p": request.params.top_p,
        });
        if let Some(k) = request.params.top_k {
            body["top_k"] = json!(k);
        }
        if let Some(m) = request.params.max_tokens {
            body["max_tokens"] = json!(m);
        }
        body
    }

    pub fn parse(value: &Value, latency: Duration) -> Result<CompletionResponse, BackendError> {
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| BackendError::MalformedResponse("missing choices[0]".into()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::MalformedResponse("missing message.content".into()))?
            .to_string();
        let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
            Some("stop") | None => FinishReason::Complete,
            Some("length") => FinishReason::Length,
            Some("content_filter") => FinishReason::ContentFilter,
            Some(other) => FinishReason::Other(other.to_string()),
        };
        Ok(CompletionResponse {
            text,
            finish_reason,
            usage: value
                .get("usage")
                .and_then(|u| usage(u, "prompt_tokens", "completion_tokens")),
            latency,
        })
    }
}

impl Transport for OpenAiCompatible {
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let builder = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key);
        let (value, latency) = send_json(builder, &Self::body(request))?;
        Self::parse(&value, latency)
    }
}

/// `POST {endpoint}` with an Anthropic-style messages body.
pub struct AnthropicCompatible {
    endpoint: String,
    api_key: String,
    client: Client,
}

impl AnthropicCompatible {
    pub fn new(endpoint: String, api_key: String, timeout: Duration) -> Result<Self, String> {
        Ok(Self {
            endpoint,
            api_key,
            client: client(timeout)?,
        })
    }

    pub fn body(request: &CompletionRequest) -> Value {
        let system: Vec<&str> = request
            .messages
            .iter()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .collect();
        let messages: Vec<Value> = request
            .messages
            .iter()
            .filter(|m| m.role != Role::System)
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        let mut body = json!({
            "model": request.model,
            "messages": messages,
            "max_tokens": request.params.max_tokens.unwrap_or(ANTHROPIC_DEFAULT_MAX_TOKENS),
            "temperature": request.params.temperature,
            "top_p": request.params.top_p,
        });
        if let Some(k) = request.params.top_k {
            body["top_k"] = json!(k);
        }
        if !system.is_empty() {
            body["system"] = json!(system.join("\n\n"));
        }
        body
    }

    pub fn parse(value: &Value, latency: Duration) -> Result<CompletionResponse, BackendError> {
        let blocks = value
            .get("content")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::MalformedResponse("missing content".into()))?;
        let text: String = blocks
            .iter()
            .filter(|b| b.get("type").and_then(Value::as_str) == Some("text"))
            .filter_map(|b| b.get("text").and_then(Value::as_str))
            .collect();
        let finish_reason = match value.get("stop_reason").and_then(Value::as_str) {
            Some("end_turn") | Some("stop_sequence") | None => FinishReason::Complete,
            Some("max_tokens") => FinishReason::Length,
            Some(other) => FinishReason::Other(other.to_string()),
        };
        Ok(CompletionResponse {
            text,
            finish_reason,
            usage: value
                .get("usage")
                .and_then(|u| usage(u, "input_tokens", "output_tokens")),
            latency,
        })
    }
}

impl Transport for AnthropicCompatible {
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let builder = self
            .client
            .post(&self.endpoint)
            .header("x-api-key", &self.api_key)
            .header("anthropic-version", ANTHROPIC_VERSION);
        let (value, latency) = send_json(builder, &Self::body(request))?;
        Self::parse(&value, latency)
    }
}
