//! Core building blocks for turning raw verbatim feedback into a structured,
//! queryable store: the record store, the language-model gateway, exact cosine
//! retrieval, retrieval-augmented few-shot classification and two-round
//! abstractive topic modeling with reviewer refinement.

pub mod classify;
pub mod index;
pub mod llm;
pub mod store;
pub mod synth;
pub mod text;
pub mod topics;

pub use index::{EmbeddingVector, IndexBuilder, IndexSnapshot, Payload};
pub use llm::{ChatMessage, ChatParams, ChatRequest, LanguageModel, Role};
pub use store::{FeedbackRecord, RecordStore};
