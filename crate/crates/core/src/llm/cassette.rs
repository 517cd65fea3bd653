//! Record/replay of model exchanges.
//!
//! A cassette is a JSONL file; each line is
//! `{"fingerprint": .., "request": .., "response": ..}`. Chat and embedding
//! requests share the file and are told apart by the request's `kind`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::fingerprint::fingerprint;
use super::{ChatRequest, LanguageModel, LlmError};
use crate::index::EmbeddingVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CassetteRequest {
    Chat(ChatRequest),
    Embed { model: String, texts: Vec<String> },
}

impl CassetteRequest {
    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteResponse {
    Completion(String),
    Embeddings(Vec<EmbeddingVector>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub request: CassetteRequest,
    pub response: CassetteResponse,
}

#[derive(Debug, Default, Clone)]
pub struct Cassette {
    entries: HashMap<String, CassetteEntry>,
    order: Vec<String>,
}

impl Cassette {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let file =
            File::open(path).map_err(|e| LlmError::Cassette(format!("{}: {e}", path.display())))?;
        let mut cassette = Cassette::default();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LlmError::Cassette(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line)
                .map_err(|e| LlmError::Cassette(format!("line {}: {e}", n + 1)))?;
            cassette.insert(entry);
        }
        Ok(cassette)
    }

    /// Keeps the first recording of a fingerprint.
    pub fn insert(&mut self, entry: CassetteEntry) -> bool {
        if self.entries.contains_key(&entry.fingerprint) {
            return false;
        }
        self.order.push(entry.fingerprint.clone());
        self.entries.insert(entry.fingerprint.clone(), entry);
        true
    }

    pub fn get(&self, fingerprint: &str) -> Option<&CassetteEntry> {
        self.entries.get(fingerprint)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &CassetteEntry> {
        self.order.iter().map(|f| &self.entries[f])
    }
}

/// Answers strictly from a cassette.
#[derive(Debug)]
pub struct Replay {
    cassette: Cassette,
    embed_model: String,
}

impl Replay {
    pub fn new(cassette: Cassette, embed_model: impl Into<String>) -> Self {
        Self {
            cassette,
            embed_model: embed_model.into(),
        }
    }

    pub fn open(path: &Path, embed_model: impl Into<String>) -> Result<Self, LlmError> {
        Ok(Self::new(Cassette::load(path)?, embed_model))
    }

    fn lookup(&self, request: &CassetteRequest) -> Result<&CassetteResponse, LlmError> {
        let fp = request.fingerprint();
        self.cassette
            .get(&fp)
            .map(|e| &e.response)
            .ok_or(LlmError::CassetteMiss(fp))
    }
}

impl LanguageModel for Replay {
    fn chat(&self, request: &ChatRequest) -> Result<String, LlmError> {
        request.validate()?;
        match self.lookup(&CassetteRequest::Chat(request.clone()))? {
            CassetteResponse::Completion(text) => Ok(text.clone()),
            CassetteResponse::Embeddings(_) => Err(LlmError::Cassette(
                "chat fingerprint maps to an embedding response".into(),
            )),
        }
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LlmError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let req = CassetteRequest::Embed {
            model: self.embed_model.clone(),
            texts: texts.to_vec(),
        };
        match self.lookup(&req)? {
            CassetteResponse::Embeddings(v) => Ok(v.clone()),
            CassetteResponse::Completion(_) => Err(LlmError::Cassette(
                "embed fingerprint maps to a completion".into(),
            )),
        }
    }
}

/// Forwards to an inner backend and appends every new exchange to a cassette
/// file. Appends are serialized by a lock.
pub struct Recorder<M> {
    inner: M,
    embed_model: String,
    path: PathBuf,
    state: Mutex<Cassette>,
}

impl<M: LanguageModel> Recorder<M> {
    /// Existing entries in `path` are kept; new exchanges are appended.
    pub fn new(
        inner: M,
        path: impl Into<PathBuf>,
        embed_model: impl Into<String>,
    ) -> Result<Self, LlmError> {
        let path = path.into();
        let existing = if path.exists() {
            Cassette::load(&path)?
        } else {
            Cassette::default()
        };
        Ok(Self {
            inner,
            embed_model: embed_model.into(),
            path,
            state: Mutex::new(existing),
        })
    }

    pub fn into_inner(self) -> M {
        self.inner
    }

    fn append(&self, request: CassetteRequest, response: CassetteResponse) -> Result<(), LlmError> {
        let entry = CassetteEntry {
            fingerprint: request.fingerprint(),
            request,
            response,
        };
        let mut state = self.state.lock();
        if state.get(&entry.fingerprint).is_some() {
            return Ok(());
        }
        let line = serde_json::to_string(&entry).map_err(|e| LlmError::Cassette(e.to_string()))?;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| LlmError::Cassette(format!("{}: {e}", self.path.display())))?;
        writeln!(file, "{line}").map_err(|e| LlmError::Cassette(e.to_string()))?;
        state.insert(entry);
        Ok(())
    }
}

impl<M: LanguageModel> LanguageModel for Recorder<M> {
    fn chat(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let text = self.inner.chat(request)?;
        self.append(
            CassetteRequest::Chat(request.clone()),
            CassetteResponse::Completion(text.clone()),
        )?;
        Ok(text)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, LlmError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let vectors = self.inner.embed(texts)?;
        self.append(
            CassetteRequest::Embed {
                model: self.embed_model.clone(),
                texts: texts.to_vec(),
            },
            CassetteResponse::Embeddings(vectors.clone()),
        )?;
        Ok(vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::mock::ScriptedModel;

    #[test]
    fn record_then_replay_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mock = ScriptedModel::new(16).rule("weather", "sunny with a chance of 0.1 rain");
        let rec = Recorder::new(mock, &path, "mini").unwrap();
        let req = ChatRequest::user("what is the weather");
        let live = rec.chat(&req).unwrap();
        let emb = rec.embed(&["a".into(), "b".into()]).unwrap();
        // duplicate exchanges are not appended twice
        rec.chat(&req).unwrap();
        drop(rec);

        let replay = Replay::open(&path, "mini").unwrap();
        assert_eq!(replay.cassette.len(), 2);
        assert_eq!(replay.chat(&req).unwrap(), live);
        assert_eq!(replay.chat(&req).unwrap(), live);
        assert_eq!(replay.embed(&["a".into(), "b".into()]).unwrap(), emb);
    }

    #[test]
    fn miss_names_fingerprint() {
        let replay = Replay::new(Cassette::default(), "mini");
        let req = ChatRequest::user("never recorded");
        let fp = CassetteRequest::Chat(req.clone()).fingerprint();
        match replay.chat(&req) {
            Err(LlmError::CassetteMiss(got)) => assert_eq!(got, fp),
            other => panic!("expected miss, got {other:?}"),
        }
        assert!(replay.embed(&[]).unwrap().is_empty());
    }
}
