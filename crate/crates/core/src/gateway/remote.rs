//! HTTP chat-completion backend.
//!
//! Sends `POST {base}/chat/completions` with a system and a user message and a
//! `json_object` response format, then decodes the first choice's content as
//! the task payload.

use std::time::Duration;

use async_trait::async_trait;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompts::PromptSet;
use super::task::TaskKind;
use super::{Backend, BackendError};

pub const ENV_API_KEY: &str = "RATAS_API_KEY";
pub const ENV_API_BASE: &str = "RATAS_API_BASE";
pub const ENV_MODEL: &str = "RATAS_MODEL";

const DEFAULT_BASE: &str = "https://api.openai.com/v1";
const DEFAULT_MODEL: &str = "gpt-4o";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub api_base: String,
    #[serde(skip_serializing)]
    pub api_key: String,
    pub model: String,
    pub temperature: f64,
}

impl RemoteConfig {
    /// Read the endpoint, credential and model from the environment.
    pub fn from_env() -> Result<Self, String> {
        let api_key = std::env::var(ENV_API_KEY)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| format!("{ENV_API_KEY} is not set"))?;
        Ok(Self {
            api_base: std::env::var(ENV_API_BASE).unwrap_or_else(|_| DEFAULT_BASE.to_string()),
            api_key,
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| DEFAULT_MODEL.to_string()),
            temperature: 0.0,
        })
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.api_base.trim_end_matches('/'))
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Debug, Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Debug)]
pub struct RemoteBackend {
    client: reqwest::Client,
    config: RemoteConfig,
    prompts: PromptSet,
    id: String,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig, prompts: PromptSet) -> Result<Self, String> {
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| format!("cannot build HTTP client: {e}"))?;
        let id = format!("remote:{}", config.model);
        Ok(Self {
            client,
            config,
            prompts,
            id,
        })
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    fn body(&self, kind: TaskKind, payload: &Value) -> Result<Value, BackendError> {
        let prompt = self
            .prompts
            .render(kind, payload)
            .map_err(BackendError::Fatal)?;
        Ok(json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
            "response_format": {"type": "json_object"},
        }))
    }
}

fn retry_after(headers: &reqwest::header::HeaderMap) -> Option<Duration> {
    headers
        .get(reqwest::header::RETRY_AFTER)?
        .to_str()
        .ok()?
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s >= 0.0)
        .map(Duration::from_secs_f64)
}

/// Pull the JSON object out of a message, tolerating a fenced code block.
fn extract_json(content: &str) -> Result<Value, BackendError> {
    let trimmed = content.trim();
    let inner = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(trimmed);
    serde_json::from_str(inner.trim())
        .map_err(|e| BackendError::Malformed(format!("content is not JSON: {e}")))
}

#[async_trait]
impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn is_remote(&self) -> bool {
        true
    }

    async fn complete(&self, kind: TaskKind, payload: &Value) -> Result<Value, BackendError> {
        let body = self.body(kind, payload)?;
        let response = self
            .client
            .post(self.config.endpoint())
            .bearer_auth(&self.config.api_key)
            .json(&body)
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;

        let status = response.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            return Err(BackendError::RateLimited {
                retry_after: retry_after(response.headers()),
            });
        }
        if status.is_server_error() || status == StatusCode::REQUEST_TIMEOUT {
            return Err(BackendError::Transport(format!("server returned {status}")));
        }
        if !status.is_success() {
            let text = response.text().await.unwrap_or_default();
            return Err(BackendError::Fatal(format!(
                "request rejected with {status}: {text}"
            )));
        }

        let parsed: ChatResponse = response
            .json()
            .await
            .map_err(|e| BackendError::Malformed(format!("unexpected response body: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Malformed("response has no message content".into()))?;
        extract_json(&content)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_plain_and_fenced_json() {
        assert_eq!(extract_json(r#"{"a":1}"#).unwrap(), json!({"a": 1}));
        assert_eq!(
            extract_json("```json\n{\"a\":1}\n```").unwrap(),
            json!({"a": 1})
        );
        assert!(matches!(
            extract_json("sure, here it is"),
            Err(BackendError::Malformed(_))
        ));
    }

    #[test]
    fn endpoint_joins_base() {
        let cfg = RemoteConfig {
            api_base: "http://localhost:9/v1/".into(),
            api_key: "k".into(),
            model: "m".into(),
            temperature: 0.0,
        };
        assert_eq!(cfg.endpoint(), "http://localhost:9/v1/chat/completions");
    }

    #[test]
    fn request_body_carries_model_messages_and_format() {
        let backend = RemoteBackend::new(
            RemoteConfig {
                api_base: "http://x".into(),
                api_key: "k".into(),
                model: "test-model".into(),
                temperature: 0.0,
            },
            PromptSet::default(),
        )
        .unwrap();
        let body = backend
            .body(TaskKind::Segment, &json!({"answer": "A", "row_rule": "R"}))
            .unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["messages"].as_array().unwrap().len(), 2);
        assert_eq!(body["response_format"]["type"], "json_object");
    }
}
