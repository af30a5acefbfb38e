//! Text-generation backends.
//!
//! [`Backend`] is the one seam between the pipeline and a language model.
//! Implementations: [`HttpBackend`] for OpenAI-compatible completion APIs,
//! [`ScriptedMock`] and [`ParametricMock`] for tests and simulations, and a
//! few wrappers that add logging, call counting, concurrency bounds or a
//! kill switch around any other backend.

mod http;
mod mock;
mod ratelimit;
mod tokens;
mod wrappers;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig, RetryPolicy, API_KEY_ENV};
pub use mock::{ParametricConfig, ParametricMock, Script, ScriptEntry, ScriptedMock};
pub use ratelimit::TokenBucket;
pub use tokens::{estimate_tokens, ByteEstimator, TokenCounter};
pub use wrappers::{AbortAfter, BoundedBackend, CountingBackend, LoggingBackend};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Pipeline-side metadata about a request. Never sent over the wire; mocks
/// use it to look up scripted behavior.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestTag {
    pub sample_id: String,
    pub context_digest: String,
    pub attempt_index: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shot_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub n_choices: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<RequestTag>,
}

impl GenRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_new_tokens: 256,
            n_choices: 1,
            stop_sequences: vec!["\n\n".to_string()],
            seed: None,
            tag: None,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn tag(mut self, tag: RequestTag) -> Self {
        self.tag = Some(tag);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenResponse {
    pub choices: Vec<Choice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    pub backend_id: String,
}

impl GenResponse {
    pub fn single(text: impl Into<String>, backend_id: &str) -> Self {
        Self {
            choices: vec![Choice {
                text: text.into(),
                finish_reason: Some("stop".into()),
            }],
            usage: None,
            backend_id: backend_id.to_string(),
        }
    }

    /// Text of the first choice.
    pub fn text(&self) -> &str {
        self.choices.first().map(|c| c.text.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LlmError {
    #[error("backend error (status {status:?}, retryable {retryable}): {message}")]
    Backend {
        retryable: bool,
        status: Option<u16>,
        message: String,
    },
    #[error("request timed out")]
    Timeout,
    /// The run was stopped on purpose. Stages stop issuing new work.
    #[error("aborted")]
    Aborted,
}

impl LlmError {
    pub fn retryable(&self) -> bool {
        match self {
            LlmError::Backend { retryable, .. } => *retryable,
            LlmError::Timeout => true,
            LlmError::Aborted => false,
        }
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, LlmError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, LlmError> {
        (**self).generate(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, LlmError> {
        (**self).generate(req)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, LlmError> {
        (**self).generate(req)
    }
}
