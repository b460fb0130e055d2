//! Compliance knowledge base and ReAct agent for FDA cGMP quality questions.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: persistent store for documents, chunks and observations.
//! - [`ingest`]: kind-specific chunking, Form 483 parsing and entity alignment.
//! - [`compliance`]: the CFR part tree, observation mapping, risk profiles and
//!   checklist scaffolds.
//! - [`retrieval`]: BM25 + vector hybrid search, fusion, re-ranking and
//!   threshold/top-k selection.
//! - [`agent`]: the plan / act / observe loop that drives retrieval and
//!   synthesises a cited dossier.
//! - [`kb`]: a facade tying the pieces together for the CLI and HTTP service.
//! - [`settings`]: layered configuration and backend construction.

pub mod agent;
pub mod compliance;
pub mod corpus;
pub(crate) mod http;
pub mod ingest;
pub mod kb;
pub mod retrieval;
pub mod settings;
pub mod text;

pub use agent::{AgentError, AgentTranscript, BackendConfig, StructuredAnswer};
pub use corpus::{Chunk, ChunkId, Corpus, CorpusError, CorpusStats, DocId, DocKind, Observation, SourceDocument};
pub use retrieval::{IndexSnapshot, RetrievalConfig, RetrievalResult, ScoredHit};
