//! Chat-completions HTTP client with image input.
//!
//! Request shape: one user message carrying a base64 data-URL image part
//! and a text part, `max_tokens` from the decoding params, and a
//! `num_beams` hint when beam search is requested (servers that ignore it
//! still work; the requested strategy is recorded in the run trace).

use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::json;

use super::{Backend, BackendError, BackendRequest, BackendResponse, DecodingStrategy};

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Full endpoint URL, e.g. `http://host:8000/v1/chat/completions`.
    pub url: String,
    /// Model name passed through in the request body.
    pub model: String,
    /// Environment variable holding the bearer token, if auth is needed.
    pub token_env: Option<String>,
    pub timeout: Duration,
}

impl HttpBackendConfig {
    pub fn new(url: impl Into<String>) -> Self {
        HttpBackendConfig {
            url: url.into(),
            model: "default".into(),
            token_env: None,
            timeout: Duration::from_secs(120),
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
    id: String,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let id = format!("http:{}", config.url);
        Ok(HttpBackend { config, client, id })
    }

    fn body(&self, req: &BackendRequest) -> serde_json::Value {
        let image_b64 = base64::engine::general_purpose::STANDARD.encode(&req.image.bytes);
        let data_url = format!("data:{};base64,{}", req.image.media_type, image_b64);
        let mut body = json!({
            "model": self.config.model,
            "messages": [{
                "role": "user",
                "content": [
                    { "type": "image_url", "image_url": { "url": data_url } },
                    { "type": "text", "text": req.prompt },
                ],
            }],
            "max_tokens": req.params.max_new_tokens,
        });
        if let DecodingStrategy::Beam(width) = req.params.strategy {
            body["num_beams"] = json!(width);
        }
        body
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let mut request = self.client.post(&self.config.url).json(&self.body(req));
        if let Some(var) = &self.config.token_env {
            let token = std::env::var(var)
                .map_err(|_| BackendError::Config(format!("auth env var {var} is not set")))?;
            request = request.bearer_auth(token);
        }
        let started = Instant::now();
        let response = request
            .send()
            .map_err(|e| BackendError::Retryable(e.to_string()))?;
        let status = response.status();
        let payload: serde_json::Value = response
            .json()
            .map_err(|e| BackendError::Retryable(format!("bad response body: {e}")))?;
        let latency = started.elapsed();
        if status.is_client_error() {
            return Err(BackendError::Config(format!("HTTP {status}: {payload}")));
        }
        if !status.is_success() {
            return Err(BackendError::Retryable(format!("HTTP {status}: {payload}")));
        }
        let text = payload["choices"][0]["message"]["content"]
            .as_str()
            .unwrap_or_default()
            .to_string();
        Ok(BackendResponse {
            text,
            latency,
            backend_id: self.id.clone(),
            raw: Some(payload),
        })
    }

    fn id(&self) -> &str {
        &self.id
    }
}
