//! Exact cosine-similarity vector store.
//!
//! Entries are added to an [`IndexBuilder`] and frozen into an immutable
//! [`IndexSnapshot`] which is cheap to share across threads. Retrieval is an
//! exhaustive scan; ties are broken by ascending id so results never depend
//! on insertion order.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero vector rejected")]
    ZeroVector,
    #[error("vector contains a non-finite value")]
    NonFinite,
    #[error("empty vector")]
    Empty,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("snapshot format error: {0}")]
    Format(String),
}

/// Fixed-length embedding. Stored as given, never renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, IndexError> {
        if values.is_empty() {
            return Err(IndexError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    /// Element-wise mean of a non-empty set of equal-length vectors.
    pub fn mean<'a>(vectors: impl IntoIterator<Item = &'a EmbeddingVector>) -> Option<Self> {
        let mut it = vectors.into_iter();
        let first = it.next()?;
        let mut acc: Vec<f64> = first.0.iter().map(|&v| f64::from(v)).collect();
        let mut n = 1usize;
        for v in it {
            for (a, &b) in acc.iter_mut().zip(&v.0) {
                *a += f64::from(b);
            }
            n += 1;
        }
        Some(Self(
            acc.into_iter().map(|a| (a / n as f64) as f32).collect(),
        ))
    }
}

/// Cosine similarity in f64, clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    let dot: f64 =
        a.0.iter()
            .zip(&b.0)
            .map(|(&x, &y)| f64::from(x) * f64::from(y))
            .sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Text and annotation carried alongside each vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub topics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub vector: EmbeddingVector,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Default)]
pub struct IndexBuilder {
    dim: Option<usize>,
    ids: HashSet<String>,
    entries: Vec<IndexEntry>,
}

impl IndexBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim: Some(dim),
            ..Self::default()
        }
    }

    /// The first insertion fixes the dimension when none was given.
    pub fn add(
        &mut self,
        id: impl Into<String>,
        vector: EmbeddingVector,
        payload: Payload,
    ) -> Result<(), IndexError> {
        let id = id.into();
        if let Some(dim) = self.dim {
            if vector.dim() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    actual: vector.dim(),
                });
            }
        }
        if vector.is_zero() {
            return Err(IndexError::ZeroVector);
        }
        if self.ids.contains(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        self.dim = Some(vector.dim());
        self.ids.insert(id.clone());
        self.entries.push(IndexEntry {
            id,
            vector,
            payload,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn finalize(self) -> IndexSnapshot {
        let norms = self.entries.iter().map(|e| e.vector.norm()).collect();
        IndexSnapshot {
            inner: Arc::new(Inner {
                dim: self.dim,
                entries: self.entries,
                norms,
            }),
        }
    }
}

#[derive(Debug)]
struct Inner {
    dim: Option<usize>,
    entries: Vec<IndexEntry>,
    norms: Vec<f64>,
}

/// Immutable, shareable view of a finalized index.
#[derive(Debug, Clone)]
pub struct IndexSnapshot {
    inner: Arc<Inner>,
}

const MAGIC: &[u8; 4] = b"FLIX";

impl IndexSnapshot {
    pub fn empty() -> Self {
        IndexBuilder::new().finalize()
    }

    pub fn dim(&self) -> Option<usize> {
        self.inner.dim
    }

    pub fn len(&self) -> usize {
        self.inner.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.inner.entries
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.inner.entries.iter().find(|e| e.id == id)
    }

    /// Cosine score of every entry against `query`, in insertion order.
    pub fn scores(&self, query: &EmbeddingVector) -> Result<Vec<f64>, IndexError> {
        if let Some(dim) = self.inner.dim {
            if query.dim() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    actual: query.dim(),
                });
            }
        }
        let qn = query.norm();
        if qn == 0.0 {
            return Err(IndexError::ZeroVector);
        }
        Ok(self
            .inner
            .entries
            .iter()
            .zip(&self.inner.norms)
            .map(|(e, &n)| {
                let dot: f64 = e
                    .vector
                    .values()
                    .iter()
                    .zip(query.values())
                    .map(|(&x, &y)| f64::from(x) * f64::from(y))
                    .sum();
                (dot / (n * qn)).clamp(-1.0, 1.0)
            })
            .collect())
    }

    /// Best `k` entries by descending cosine, ties by ascending id.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Hit>, IndexError> {
        self.top_k_filtered(query, k, |_| true)
    }

    /// As [`top_k`](Self::top_k) restricted to entries accepted by `keep`.
    pub fn top_k_filtered(
        &self,
        query: &EmbeddingVector,
        k: usize,
        keep: impl Fn(&IndexEntry) -> bool,
    ) -> Result<Vec<Hit>, IndexError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let scores = self.scores(query)?;
        let mut ranked: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|(i, _)| keep(&self.inner.entries[*i]))
            .collect();
        let entries = &self.inner.entries;
        let order = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.total_cmp(&a.1)
                .then_with(|| entries[a.0].id.cmp(&entries[b.0].id))
        };
        if ranked.len() > k {
            ranked.select_nth_unstable_by(k - 1, order);
            ranked.truncate(k);
        }
        ranked.sort_by(order);
        Ok(ranked
            .into_iter()
            .map(|(i, score)| Hit {
                id: entries[i].id.clone(),
                score,
            })
            .collect())
    }

    /// Layout: magic, u32 dim, u32 count, count*dim little-endian f32, then
    /// for each entry a u32-length-prefixed id followed by a u32-length-prefixed
    /// JSON payload.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let dim = self.inner.dim.unwrap_or(0) as u32;
        w.write_all(MAGIC)?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for e in &self.inner.entries {
            for v in e.vector.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for e in &self.inner.entries {
            write_chunk(&mut w, e.id.as_bytes())?;
            let payload = serde_json::to_vec(&e.payload).map_err(std::io::Error::other)?;
            write_chunk(&mut w, &payload)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, IndexError> {
        let fmt = |e: std::io::Error| IndexError::Format(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != MAGIC {
            return Err(IndexError::Format("bad magic".into()));
        }
        let dim = read_u32(&mut r).map_err(fmt)? as usize;
        let count = read_u32(&mut r).map_err(fmt)? as usize;
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut vals = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                r.read_exact(&mut b).map_err(fmt)?;
                vals.push(f32::from_le_bytes(b));
            }
            vectors.push(EmbeddingVector::new(vals)?);
        }
        let mut builder = if dim > 0 {
            IndexBuilder::with_dim(dim)
        } else {
            IndexBuilder::new()
        };
        for vector in vectors {
            let id = String::from_utf8(read_chunk(&mut r).map_err(fmt)?)
                .map_err(|e| IndexError::Format(e.to_string()))?;
            let payload: Payload = serde_json::from_slice(&read_chunk(&mut r).map_err(fmt)?)
                .map_err(|e| IndexError::Format(e.to_string()))?;
            builder.add(id, vector, payload)?;
        }
        Ok(builder.finalize())
    }
}

fn write_chunk(w: &mut impl Write, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_chunk(r: &mut impl Read) -> std::io::Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine(&v(&[2.0, 2.0]), &v(&[1.0, 1.0])).unwrap() - 1.0).abs() < 1e-12);
        // dot = 32, |a| = sqrt(14), |b| = sqrt(77)
        let expected = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        let got = cosine(&v(&[1.0, 2.0, 3.0]), &v(&[4.0, 5.0, 6.0])).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.97463).abs() < 1e-5);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine(&v(&[1.0]), &v(&[1.0, 2.0])),
            Err(IndexError::DimensionMismatch {
                expected: 1,
                actual: 2
            })
        );
        assert_eq!(
            cosine(&v(&[0.0, 0.0]), &v(&[1.0, 2.0])),
            Err(IndexError::ZeroVector)
        );
    }

    #[test]
    fn add_validates() {
        let mut b = IndexBuilder::new();
        b.add("a", v(&[1.0, 0.0]), Payload::default()).unwrap();
        assert!(matches!(
            b.add("b", v(&[1.0, 0.0, 0.0]), Payload::default()),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert_eq!(
            b.add("c", v(&[0.0, 0.0]), Payload::default()),
            Err(IndexError::ZeroVector)
        );
        assert_eq!(
            b.add("a", v(&[0.0, 1.0]), Payload::default()),
            Err(IndexError::DuplicateId("a".into()))
        );
        assert!(EmbeddingVector::new(vec![f32::NAN]).is_err());
    }

    #[test]
    fn self_similarity_and_k_zero() {
        let mut b = IndexBuilder::new();
        b.add("only", v(&[0.3, -0.2, 0.9]), Payload::default())
            .unwrap();
        let snap = b.finalize();
        let hits = snap.top_k(&v(&[0.3, -0.2, 0.9]), 3).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, "only");
        assert!((hits[0].score - 1.0).abs() < 1e-9);
        assert!(snap.top_k(&v(&[1.0, 0.0, 0.0]), 0).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_id() {
        let mut b = IndexBuilder::new();
        for id in ["z", "m", "a"] {
            b.add(id, v(&[1.0, 1.0]), Payload::default()).unwrap();
        }
        let ids: Vec<_> = b
            .finalize()
            .top_k(&v(&[2.0, 2.0]), 3)
            .unwrap()
            .into_iter()
            .map(|h| h.id)
            .collect();
        assert_eq!(ids, ["a", "m", "z"]);
    }

    #[test]
    fn snapshot_file_roundtrip() {
        let mut b = IndexBuilder::new();
        b.add(
            "x1",
            v(&[0.5, 1.5]),
            Payload {
                text: "hello".into(),
                label: Some("bug".into()),
                topics: vec![],
            },
        )
        .unwrap();
        b.add(
            "x2",
            v(&[-1.0, 2.0]),
            Payload {
                text: "world".into(),
                label: None,
                topics: vec!["ui".into()],
            },
        )
        .unwrap();
        let snap = b.finalize();
        let mut buf = Vec::new();
        snap.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FLIX");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        let back = IndexSnapshot::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.entries(), snap.entries());
    }

    fn arb_vec(dim: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-1.0f32..1.0, dim)
            .prop_filter("non-zero", |xs| xs.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn prefix_monotonicity(
            vecs in prop::collection::vec(arb_vec(6), 1..40),
            q in arb_vec(6),
            k in 0usize..45,
        ) {
            let mut b = IndexBuilder::new();
            for (i, xs) in vecs.iter().enumerate() {
                b.add(format!("id{i:03}"), v(xs), Payload::default()).unwrap();
            }
            let snap = b.finalize();
            let q = v(&q);
            let small = snap.top_k(&q, k).unwrap();
            let large = snap.top_k(&q, k + 1).unwrap();
            prop_assert_eq!(small.len(), k.min(vecs.len()));
            prop_assert_eq!(&large[..small.len()], &small[..]);
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(a in arb_vec(5), b in arb_vec(5), s in 0.01f32..100.0) {
            let (a, b) = (v(&a), v(&b));
            let ab = cosine(&a, &b).unwrap();
            prop_assert!((ab - cosine(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((ab - cosine(&a.scaled(s), &b).unwrap()).abs() < 1e-5);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}
