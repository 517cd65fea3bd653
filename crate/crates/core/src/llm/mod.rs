//! The only path to language-model capabilities.
//!
//! Every consumer talks to a [`LanguageModel`]. Backends:
//!
//! * [`live::OpenAiCompatible`] speaks the chat-completions and embeddings
//!   HTTP contract.
//! * [`cassette::Recorder`] wraps any backend and appends each exchange to a
//!   cassette file.
//! * [`cassette::Replay`] answers only from a cassette and never touches the
//!   network.
//! * [`mock::ScriptedModel`] maps prompt patterns to canned completions and
//!   embeds with [`mock::HashEmbedder`], for unit tests.

pub mod cassette;
pub mod fingerprint;
pub mod live;
pub mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::EmbeddingVector;

pub const DEFAULT_CHAT_MODEL: &str = "gpt-4";
pub const DEFAULT_EMBED_MODEL: &str = "all-MiniLM-L6-v2";
pub const DEFAULT_EMBED_DIM: usize = 384;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("cassette has no entry for fingerprint {0}")]
    CassetteMiss(String),
    #[error("provider returned {status}: {body}")]
    ProviderError { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed provider response: {0}")]
    BadResponse(String),
    #[error("cassette i/o: {0}")]
    Cassette(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Sampling parameters. Temperature and top_p default to zero so that
/// identical prompts yield identical completions as far as the provider
/// allows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub model: String,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_p: 0.0,
            max_tokens: 1024,
            model: DEFAULT_CHAT_MODEL.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub params: ChatParams,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            params: ChatParams::default(),
        }
    }

    pub fn user(prompt: impl Into<String>) -> Self {
        Self::new(vec![ChatMessage::user(prompt)])
    }

    pub fn with_params(mut self, params: ChatParams) -> Self {
        self.params = params;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest(
                "messages must be non-empty".into(),
            ));
        }
        if self.params.temperature.is_nan() || self.params.temperature < 0.0 {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.params.top_p) {
            return Err(LlmError::InvalidRequest(
                "top_p must be within [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Concatenation of every message body, used by pattern-matching mocks.
    pub fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub trait LanguageModel: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, LlmError>;

    /// One vector per input text, in input order, all of one dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LlmError>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        self.embed(&[text.to_string()])?
            .pop()
            .ok_or_else(|| LlmError::BadResponse("empty embedding response".into()))
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn chat(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).chat(request)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LlmError> {
        (**self).embed(texts)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<M> {
    fn chat(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).chat(request)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LlmError> {
        (**self).embed(texts)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Box<M> {
    fn chat(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).chat(request)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LlmError> {
        (**self).embed(texts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_deterministic_sampling() {
        let p = ChatParams::default();
        assert_eq!(p.temperature, 0.0);
        assert_eq!(p.top_p, 0.0);
    }

    #[test]
    fn validation() {
        assert!(ChatRequest::new(vec![]).validate().is_err());
        let mut r = ChatRequest::user("hi");
        r.params.temperature = -0.1;
        assert!(r.validate().is_err());
        r.params.temperature = 0.7;
        r.params.top_p = 1.5;
        assert!(r.validate().is_err());
        r.params.top_p = 1.0;
        assert!(r.validate().is_ok());
    }
}
