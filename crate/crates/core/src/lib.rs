//! Demonstration selection for multimodal in-context learning.
//!
//! Correlational retrieval picks the demonstrations that look most like the
//! query. The causal branch asks the model which attributes drive the
//! answer, rewrites the query description with each one changed, and
//! retrieves examples for every rewrite. Both pools are rendered into a
//! single prompt.

pub mod causal;
pub mod corpus;
pub mod embedstore;
pub mod endpoint;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod mockworld;
pub mod prompting;
pub mod retrieval;

pub use corpus::{load_corpus, subsample_corpus, Corpus, Example, TaskKind};
pub use embedstore::{EmbeddingKind, EmbeddingRecord, EmbeddingStore};
pub use error::{Error, Result};
pub use retrieval::{Provenance, QueryEmbedding, RetrievalSet, Retriever, ScoredCandidate};
