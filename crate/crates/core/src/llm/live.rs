//! OpenAI-compatible HTTP backend.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use log::{debug, warn};
use parking_lot::Mutex;
use serde::Deserialize;
use serde_json::json;

use super::{ChatRequest, LanguageModel, LlmError};
use crate::index::EmbeddingVector;

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Base URL without the `/v1/...` suffix.
    pub base_url: String,
    pub api_key: Option<String>,
    pub embed_model: String,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    /// Sustained requests per second; bursts up to `burst`.
    pub rate_per_sec: f64,
    pub burst: u32,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com".into(),
            api_key: None,
            embed_model: super::DEFAULT_EMBED_MODEL.into(),
            timeout: Duration::from_secs(60),
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
            rate_per_sec: 5.0,
            burst: 5,
        }
    }
}

/// Token bucket. `acquire` sleeps until a token is available.
#[derive(Debug)]
pub struct RateLimiter {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(rate_per_sec: f64, burst: u32) -> Self {
        let capacity = f64::from(burst.max(1));
        Self {
            rate: rate_per_sec.max(1e-6),
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock();
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.rate;
                st.0 = (st.0 + refill).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) / self.rate)
            };
            std::thread::sleep(wait);
        }
    }
}

pub struct OpenAiCompatible {
    config: LiveConfig,
    limiter: RateLimiter,
    client: OnceLock<reqwest::blocking::Client>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: AssistantMessage,
}

#[derive(Deserialize)]
struct AssistantMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: usize,
    embedding: Vec<f32>,
}

enum Failure {
    Retryable(LlmError),
    Fatal(LlmError),
}

impl OpenAiCompatible {
    pub fn new(config: LiveConfig) -> Self {
        let limiter = RateLimiter::new(config.rate_per_sec, config.burst);
        Self {
            config,
            limiter,
            client: OnceLock::new(),
        }
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(self.config.timeout)
                .build()
                .expect("http client")
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1/{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn post_once(&self, path: &str, body: &serde_json::Value) -> Result<String, Failure> {
        self.limiter.acquire();
        let mut req = self.client().post(self.url(path)).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Failure::Retryable(LlmError::Timeout)
            } else {
                Failure::Retryable(LlmError::Transport(e.to_string()))
            }
        })?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Failure::Retryable(LlmError::Transport(e.to_string())))?;
        if status.is_success() {
            Ok(text)
        } else {
            let err = LlmError::ProviderError {
                status: status.as_u16(),
                body: text,
            };
            if status.is_server_error() {
                Err(Failure::Retryable(err))
            } else {
                Err(Failure::Fatal(err))
            }
        }
    }

    /// Retries transport failures and 5xx with exponential backoff; 4xx
    /// responses are returned immediately.
    fn post(&self, path: &str, body: &serde_json::Value) -> Result<String, LlmError> {
        let attempts = self.config.max_attempts.max(1);
        let mut last = None;
        for attempt in 0..attempts {
            match self.post_once(path, body) {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(e)) => {
                    warn!("{path} attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                    if attempt + 1 < attempts {
                        std::thread::sleep(self.config.backoff_base * 2u32.pow(attempt));
                    }
                }
            }
        }
        Err(last.unwrap_or(LlmError::Transport("no attempt made".into())))
    }
}

impl LanguageModel for OpenAiCompatible {
    fn chat(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        let body = json!({
            "model": request.params.model,
            "messages": request.messages,
            "temperature": request.params.temperature,
            "top_p": request.params.top_p,
            "max_tokens": request.params.max_tokens,
        });
        debug!("chat request with {} messages", request.messages.len());
        let raw = self.post("chat/completions", &body)?;
        let parsed: ChatResponse =
            serde_json::from_str(&raw).map_err(|e| LlmError::BadResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| LlmError::BadResponse("no choices".into()))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LlmError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({ "model": self.config.embed_model, "input": texts });
        let raw = self.post("embeddings", &body)?;
        let mut parsed: EmbeddingResponse =
            serde_json::from_str(&raw).map_err(|e| LlmError::BadResponse(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(LlmError::BadResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        parsed.data.sort_by_key(|d| d.index);
        let vectors = parsed
            .data
            .into_iter()
            .map(|d| {
                EmbeddingVector::new(d.embedding).map_err(|e| LlmError::BadResponse(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if vectors.windows(2).any(|w| w[0].dim() != w[1].dim()) {
            return Err(LlmError::BadResponse(
                "embeddings differ in dimension".into(),
            ));
        }
        Ok(vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves canned (status, body) pairs in order, one per connection.
    fn serve(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (h, b) = (hits.clone(), bodies.clone());
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut req_body = vec![0u8; len];
                reader.read_exact(&mut req_body).unwrap();
                b.lock().push(String::from_utf8(req_body).unwrap());
                h.fetch_add(1, Ordering::SeqCst);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (addr, hits, bodies)
    }

    fn config(base_url: String) -> LiveConfig {
        LiveConfig {
            base_url,
            api_key: Some("k".into()),
            backoff_base: Duration::from_millis(1),
            rate_per_sec: 1000.0,
            burst: 10,
            ..LiveConfig::default()
        }
    }

    #[test]
    fn chat_sends_zero_sampling_and_parses() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"informative"}}]}"#;
        let (url, hits, bodies) = serve(vec![(200, ok.into())]);
        let model = OpenAiCompatible::new(config(url));
        assert_eq!(model.chat(&ChatRequest::user("x")).unwrap(), "informative");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
        let sent: serde_json::Value = serde_json::from_str(&bodies.lock()[0]).unwrap();
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["top_p"], 0.0);
    }

    #[test]
    fn server_errors_retry_three_times() {
        let (url, hits, _) = serve(vec![
            (500, "{}".into()),
            (502, "{}".into()),
            (503, "down".into()),
        ]);
        let model = OpenAiCompatible::new(config(url));
        match model.chat(&ChatRequest::user("x")) {
            Err(LlmError::ProviderError { status: 503, body }) => assert_eq!(body, "down"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_do_not_retry() {
        let (url, hits, _) = serve(vec![(400, "bad".into()), (200, "{}".into())]);
        let model = OpenAiCompatible::new(config(url));
        assert!(matches!(
            model.chat(&ChatRequest::user("x")),
            Err(LlmError::ProviderError { status: 400, .. })
        ));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn embeddings_follow_index_order() {
        let body = r#"{"data":[{"index":1,"embedding":[0,1]},{"index":0,"embedding":[1,0]}]}"#;
        let (url, _, _) = serve(vec![(200, body.into())]);
        let model = OpenAiCompatible::new(config(url));
        let v = model.embed(&["a".into(), "b".into()]).unwrap();
        assert_eq!(v[0].values(), &[1.0, 0.0]);
        assert_eq!(v[1].values(), &[0.0, 1.0]);
    }

    #[test]
    fn limiter_spaces_requests() {
        let l = RateLimiter::new(100.0, 1);
        let start = Instant::now();
        for _ in 0..4 {
            l.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(25));
    }
}
