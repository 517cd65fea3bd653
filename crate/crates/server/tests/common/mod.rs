#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, HeaderMap, Method, Request, StatusCode};
use axum::Router;
use feedlens_core::store::RecordStore;
use feedlens_core::LanguageModel;
use feedlens_server::http::router;
use feedlens_server::{App, Config};
use http_body_util::BodyExt;
use serde_json::Value;
use tempfile::TempDir;
use tower::ServiceExt;

pub struct Harness {
    pub dir: TempDir,
    pub app: Arc<App>,
    router: Router,
    token: Option<String>,
}

pub fn config(dir: &Path) -> Config {
    let mut c = Config::default();
    c.server.data_dir = dir.join("data");
    c.server.artifact_secret = Some("test-secret".into());
    c
}

pub fn harness(
    model: Arc<dyn LanguageModel>,
    store: RecordStore,
    edit: impl FnOnce(&mut Config),
) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path());
    edit(&mut c);
    let token = c.server.token.clone();
    let app = Arc::new(App::with_parts(c, model, store).unwrap());
    Harness {
        router: router(app.clone()),
        app,
        dir,
        token,
    }
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes)
            .unwrap_or_else(|e| panic!("not json ({e}): {}", String::from_utf8_lossy(&self.bytes)))
    }
}

impl Harness {
    pub async fn send(&self, mut req: Request<Body>) -> Reply {
        if let Some(t) = &self.token {
            if !req.headers().contains_key(header::AUTHORIZATION) {
                req.headers_mut().insert(
                    header::AUTHORIZATION,
                    format!("Bearer {t}").parse().unwrap(),
                );
            }
        }
        let res = self.router.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let headers = res.headers().clone();
        let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply {
            status,
            headers,
            bytes,
        }
    }

    pub async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> Reply {
        let builder = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(v) => builder
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from(v.to_string())),
            None => builder.body(Body::empty()),
        };
        self.send(req.unwrap()).await
    }

    pub async fn get(&self, uri: &str) -> Reply {
        self.call(Method::GET, uri, None).await
    }

    pub async fn post(&self, uri: &str, body: Value) -> Reply {
        self.call(Method::POST, uri, Some(body)).await
    }

    /// Polls a job until it is terminal and returns every status seen.
    pub async fn wait_job(&self, id: &str) -> Vec<Value> {
        let mut seen = Vec::new();
        for _ in 0..2000 {
            let r = self.get(&format!("/jobs/{id}")).await;
            assert_eq!(r.status, StatusCode::OK);
            let v = r.json();
            let done = matches!(
                v["state"].as_str(),
                Some("succeeded" | "failed" | "canceled")
            );
            seen.push(v);
            if done {
                return seen;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        panic!("job {id} did not finish");
    }
}

/// A model that sleeps before every chat call, so jobs can be caught
/// while they run.
pub struct Slow<M>(pub M, pub Duration);

impl<M: LanguageModel> LanguageModel for Slow<M> {
    fn chat(
        &self,
        request: &feedlens_core::ChatRequest,
    ) -> Result<String, feedlens_core::llm::LlmError> {
        std::thread::sleep(self.1);
        self.0.chat(request)
    }

    fn embed(
        &self,
        texts: &[String],
    ) -> Result<Vec<feedlens_core::EmbeddingVector>, feedlens_core::llm::LlmError> {
        self.0.embed(texts)
    }
}
