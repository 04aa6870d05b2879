//! Live provider speaking the de-facto chat-completions HTTP JSON protocol.

use super::{GenerationRequest, GenerationResponse, LlmError, Provider};
use crate::model::estimate_tokens;
use serde::Deserialize;
use serde_json::json;
use std::time::Duration;

pub const ENV_API_KEY: &str = "I2S_API_KEY";
pub const ENV_BASE_URL: &str = "I2S_BASE_URL";
pub const ENV_JUDGE_API_KEY: &str = "I2S_JUDGE_API_KEY";
pub const ENV_JUDGE_BASE_URL: &str = "I2S_JUDGE_BASE_URL";
pub const ENV_MODEL: &str = "I2S_MODEL";

pub struct HttpProvider {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    model: String,
    id: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct UsageBody {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

impl HttpProvider {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        let base_url = base_url.into().trim_end_matches('/').to_string();
        let model = model.into();
        HttpProvider {
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(600))
                .build()
                .expect("reqwest client"),
            id: format!("http/{base_url}/{model}"),
            base_url,
            api_key,
            model,
        }
    }

    /// Provider configured from I2S_BASE_URL / I2S_API_KEY / I2S_MODEL.
    pub fn from_env() -> Result<Self, LlmError> {
        Self::from_vars(ENV_BASE_URL, ENV_API_KEY)
    }

    /// Judge-side provider from I2S_JUDGE_BASE_URL / I2S_JUDGE_API_KEY.
    pub fn judge_from_env() -> Result<Self, LlmError> {
        Self::from_vars(ENV_JUDGE_BASE_URL, ENV_JUDGE_API_KEY)
    }

    fn from_vars(url_var: &str, key_var: &str) -> Result<Self, LlmError> {
        let base_url = std::env::var(url_var)
            .map_err(|_| LlmError::InvalidRequest(format!("{url_var} is not set")))?;
        let api_key = std::env::var(key_var).ok();
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".into());
        Ok(Self::new(base_url, api_key, model))
    }
}

impl Provider for HttpProvider {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
        let mut body = json!({
            "model": self.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        });
        if let Some(stop) = &request.stop {
            body["stop"] = json!(stop);
        }
        let url = format!("{}/chat/completions", self.base_url);
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 {
            return Err(LlmError::RateLimited);
        }
        if status.is_server_error() {
            return Err(LlmError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(LlmError::Protocol(format!("HTTP {status}: {body}")));
        }
        let text = response.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| LlmError::Protocol(format!("malformed response body: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::Protocol("response has no choices".into()))?;
        let content = choice.message.content;
        let usage = parsed.usage.unwrap_or(UsageBody { prompt_tokens: None, completion_tokens: None });
        Ok(GenerationResponse {
            prompt_tokens: usage
                .prompt_tokens
                .unwrap_or_else(|| estimate_tokens(&request.prompt_text(), None)),
            completion_tokens: usage
                .completion_tokens
                .unwrap_or_else(|| estimate_tokens(&content, None)),
            text: content,
            provider_id: self.id.clone(),
        })
    }

    fn id(&self) -> &str {
        &self.id
    }
}
