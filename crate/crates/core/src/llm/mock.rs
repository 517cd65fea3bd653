//! Deterministic stand-ins for tests and offline runs.

use std::sync::atomic::{AtomicUsize, Ordering};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use super::{ChatRequest, LanguageModel, LlmError};
use crate::index::EmbeddingVector;
use crate::text::tokenize;

/// Embeds a text as the sum of one pseudo-random vector per token, each
/// drawn from a generator seeded by hashing `(seed, token)`. Texts sharing
/// tokens point in similar directions; the same text always maps to the same
/// vector.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self::with_seed(dim, 0x5eed)
    }

    pub fn with_seed(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn token_vector(&self, token: &str) -> Vec<f32> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect()
    }

    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            tokens.push(format!("\u{0}{text}"));
        }
        let mut acc = vec![0f32; self.dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        if acc.iter().all(|&v| v == 0.0) {
            acc[0] = 1.0;
        }
        EmbeddingVector::new(acc).expect("finite by construction")
    }
}

struct Rule {
    pattern: Regex,
    responses: Vec<String>,
    cursor: AtomicUsize,
}

/// Maps prompt patterns to canned completions.
///
/// Rules are tried in insertion order against the content of the request's
/// last message; the first match answers. A rule with several responses
/// hands them out in order and then repeats the last one.
pub struct ScriptedModel {
    rules: Vec<Rule>,
    fallback: Option<String>,
    embedder: HashEmbedder,
    log: Mutex<Vec<ChatRequest>>,
    embed_calls: AtomicUsize,
}

impl ScriptedModel {
    pub fn new(dim: usize) -> Self {
        Self::with_embedder(HashEmbedder::new(dim))
    }

    pub fn with_embedder(embedder: HashEmbedder) -> Self {
        Self {
            rules: Vec::new(),
            fallback: None,
            embedder,
            log: Mutex::new(Vec::new()),
            embed_calls: AtomicUsize::new(0),
        }
    }

    /// Literal substring rule.
    pub fn rule(self, needle: &str, response: impl Into<String>) -> Self {
        self.sequence(needle, [response])
    }

    pub fn sequence<S: Into<String>>(
        self,
        needle: &str,
        responses: impl IntoIterator<Item = S>,
    ) -> Self {
        self.regex_sequence(&regex::escape(needle), responses)
    }

    pub fn regex_rule(self, pattern: &str, response: impl Into<String>) -> Self {
        self.regex_sequence(pattern, [response])
    }

    pub fn regex_sequence<S: Into<String>>(
        mut self,
        pattern: &str,
        responses: impl IntoIterator<Item = S>,
    ) -> Self {
        let responses: Vec<String> = responses.into_iter().map(Into::into).collect();
        assert!(!responses.is_empty(), "a rule needs at least one response");
        self.rules.push(Rule {
            pattern: Regex::new(pattern).expect("valid rule pattern"),
            responses,
            cursor: AtomicUsize::new(0),
        });
        self
    }

    pub fn fallback(mut self, response: impl Into<String>) -> Self {
        self.fallback = Some(response.into());
        self
    }

    pub fn calls(&self) -> Vec<ChatRequest> {
        self.log.lock().clone()
    }

    pub fn chat_count(&self) -> usize {
        self.log.lock().len()
    }

    pub fn embed_count(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }
}

impl LanguageModel for ScriptedModel {
    fn chat(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        self.log.lock().push(request.clone());
        let prompt = request
            .messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        for rule in &self.rules {
            if rule.pattern.is_match(prompt) {
                let i = rule
                    .cursor
                    .fetch_add(1, Ordering::SeqCst)
                    .min(rule.responses.len() - 1);
                return Ok(rule.responses[i].clone());
            }
        }
        self.fallback
            .clone()
            .ok_or_else(|| LlmError::ProviderError {
                status: 404,
                body: "no scripted rule matches the prompt".into(),
            })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LlmError> {
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.embedder.embed_text(t)).collect())
    }
}

/// Counts calls passing through to an inner backend.
pub struct Counting<M> {
    inner: M,
    chats: AtomicUsize,
    embeds: AtomicUsize,
}

impl<M> Counting<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            chats: AtomicUsize::new(0),
            embeds: AtomicUsize::new(0),
        }
    }

    pub fn chat_count(&self) -> usize {
        self.chats.load(Ordering::SeqCst)
    }

    pub fn embed_count(&self) -> usize {
        self.embeds.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }
}

impl<M: LanguageModel> LanguageModel for Counting<M> {
    fn chat(&self, request: &ChatRequest) -> Result<String, LlmError> {
        self.chats.fetch_add(1, Ordering::SeqCst);
        self.inner.chat(request)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LlmError> {
        self.embeds.fetch_add(1, Ordering::SeqCst);
        self.inner.embed(texts)
    }
}
