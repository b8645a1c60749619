//! Opaque model-service abstraction.
//!
//! The pipeline only ever sends (image, prompt, decoding params) and reads
//! text back. Two implementations ship here: an HTTP client speaking the
//! chat-completions JSON shape, and a deterministic scripted mock used for
//! oracle and chaos testing. A retry decorator adds bounded exponential
//! backoff over any backend.

mod http;
mod mock;

pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{
    mock_from_annotations, ChaosConfig, ChaosMock, DmAnnotation, MockTask, ScriptedMock,
};

use std::thread::sleep;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    /// Transient transport-level failure; eligible for retry.
    #[error("retryable: {0}")]
    Retryable(String),
    /// The request or endpoint is misconfigured; retrying cannot help.
    #[error("config: {0}")]
    Config(String),
    /// Retries exhausted or a non-recoverable runtime failure.
    #[error("run: {0}")]
    Run(String),
    /// The scripted mock has no entry for this request.
    #[error("mock miss: {0}")]
    MockMiss(String),
}

/// Decoding strategy requested from the backend. Servers that cannot honor
/// beam search still receive the request; the strategy is recorded so such
/// servers can be flagged downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodingStrategy {
    Greedy,
    Beam(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub max_new_tokens: u32,
    pub strategy: DecodingStrategy,
}

impl DecodingParams {
    pub fn greedy(max_new_tokens: u32) -> Self {
        DecodingParams {
            max_new_tokens,
            strategy: DecodingStrategy::Greedy,
        }
    }

    pub fn beam(max_new_tokens: u32, width: u32) -> Self {
        DecodingParams {
            max_new_tokens,
            strategy: DecodingStrategy::Beam(width),
        }
    }
}

/// Image bytes plus media type, as sent to the backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

impl ImagePayload {
    /// Placeholder payload used when no real image files are mounted
    /// (synthetic fixtures, mock-backed runs). The frame key is encoded in
    /// the bytes so the scripted mock can recover it.
    pub fn synthetic(frame: &crate::dataset::FrameKey) -> Self {
        ImagePayload {
            bytes: format!("synthetic-image:{frame}").into_bytes(),
            media_type: "application/octet-stream".into(),
        }
    }

    /// Frame key recovered from a synthetic payload, if it is one.
    pub fn synthetic_frame(&self) -> Option<crate::dataset::FrameKey> {
        let text = std::str::from_utf8(&self.bytes).ok()?;
        let rest = text.strip_prefix("synthetic-image:")?;
        crate::dataset::FrameKey::parse(rest)
    }
}

#[derive(Debug, Clone)]
pub struct BackendRequest {
    pub request_id: String,
    pub image: ImagePayload,
    pub prompt: String,
    pub params: DecodingParams,
}

#[derive(Debug, Clone)]
pub struct BackendResponse {
    pub text: String,
    pub latency: Duration,
    pub backend_id: String,
    /// Raw wire payload kept for audit; None for in-process backends.
    pub raw: Option<serde_json::Value>,
}

/// One text completion per request. Implementations must be safe to call
/// from many workers at once.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError>;
    fn id(&self) -> &str;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(req)
    }
    fn id(&self) -> &str {
        (**self).id()
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).complete(req)
    }
    fn id(&self) -> &str {
        (**self).id()
    }
}

/// Bounded-retry decorator: retries `Retryable` errors up to `max_attempts`
/// total attempts with exponential backoff, then reports a `Run` error.
/// Everything else passes straight through.
pub struct Retrying<B> {
    inner: B,
    max_attempts: u32,
    initial_backoff: Duration,
}

impl<B: Backend> Retrying<B> {
    pub fn new(inner: B, max_attempts: u32, initial_backoff: Duration) -> Self {
        Retrying {
            inner,
            max_attempts: max_attempts.max(1),
            initial_backoff,
        }
    }
}

impl<B: Backend> Backend for Retrying<B> {
    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let mut backoff = self.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.max_attempts {
            match self.inner.complete(req) {
                Ok(resp) => return Ok(resp),
                Err(BackendError::Retryable(msg)) => {
                    last = msg;
                    if attempt < self.max_attempts {
                        sleep(backoff);
                        backoff = backoff.saturating_mul(2);
                    }
                }
                Err(other) => return Err(other),
            }
        }
        Err(BackendError::Run(format!(
            "request {} failed after {} attempts: {last}",
            req.request_id, self.max_attempts
        )))
    }

    fn id(&self) -> &str {
        self.inner.id()
    }
}
