//! Knowledge-base facade shared by the CLI and the HTTP service: ingestion per
//! document kind, the CFR manifest, alignment decisions and index rebuilds.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::{load_cfr_tree, risk_profile, CfrTree, ComplianceError, RiskFilter, RiskReport};
use crate::corpus::{write_atomic, Chunk, Corpus, CorpusError, CorpusStats, DocId, DocKind, SourceDocument};
use crate::ingest::{
    apply_alignment, chunk_483, chunk_qa, chunk_regulatory, parse_483, parse_decisions, parse_qa_jsonl, propose_groups, qa_body, AlignmentDecision,
    ChunkConfig, EntityKind, GroupProposal, IngestError, Normalizer, QaPair,
};
use crate::retrieval::{index_chunks, Embedder, IndexSnapshot, RetrievalError};

const MANIFEST_FILE: &str = "cfr_manifest.txt";
const DECISIONS_FILE: &str = "alignment_decisions.jsonl";
const INDEX_FILE: &str = "index.json";

#[derive(Debug, Error)]
pub enum KbError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Compliance(#[from] ComplianceError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("payload has no records")]
    EmptyPayload,
}

impl KbError {
    /// Name of the underlying typed error, for API responses.
    pub fn kind_name(&self) -> &'static str {
        match self {
            KbError::Corpus(e) => match e {
                CorpusError::EmptyBody => "EmptyBody",
                CorpusError::DuplicateIdWithDifferentContent(_) => "DuplicateIdWithDifferentContent",
                CorpusError::UnknownDocument(_) => "UnknownDocument",
                CorpusError::WrongKind { .. } => "WrongKind",
                CorpusError::InvalidChunk(_) => "InvalidChunk",
                CorpusError::Io { .. } => "Io",
                CorpusError::Json { .. } => "CorruptStore",
            },
            KbError::Ingest(e) => match e {
                IngestError::InvalidConfig(_) => "InvalidConfig",
                IngestError::ObservationTooLarge { .. } => "ObservationTooLarge",
                IngestError::EmptyPairMember { .. } => "EmptyPairMember",
                IngestError::WrongKind { .. } => "WrongKind",
                IngestError::EmptyEntity => "EmptyEntity",
                IngestError::UnknownProposal(_) => "UnknownProposal",
                IngestError::ConflictingDecisions(_) => "ConflictingDecisions",
                IngestError::MixedKinds(_) => "MixedKinds",
                IngestError::Stoplist { .. } => "Stoplist",
            },
            KbError::Compliance(e) => match e {
                ComplianceError::ParseError { .. } => "ParseError",
                ComplianceError::DuplicatePart(_) => "DuplicatePart",
            },
            KbError::Retrieval(e) => match e {
                RetrievalError::BackendUnavailable(_) => "BackendUnavailable",
                RetrievalError::DimensionMismatch { .. } => "DimensionMismatch",
                _ => "RetrievalError",
            },
            KbError::Json { .. } => "ParseError",
            KbError::EmptyPayload => "EmptyPayload",
        }
    }

    /// True when the caller sent something invalid, as opposed to a store or
    /// backend failure.
    pub fn is_client_error(&self) -> bool {
        !matches!(self, KbError::Corpus(CorpusError::Io { .. } | CorpusError::Json { .. }) | KbError::Retrieval(_))
    }
}

pub type Result<T, E = KbError> = std::result::Result<T, E>;

/// One regulatory or Form 483 document in an ingest payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentInput {
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub source_uri: String,
    #[serde(default = "yes")]
    pub verified: bool,
}

fn yes() -> bool {
    true
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|source| KbError::Json { line: i + 1, source })?);
    }
    if out.is_empty() {
        return Err(KbError::EmptyPayload);
    }
    Ok(out)
}

pub fn parse_documents(jsonl: &str) -> Result<Vec<DocumentInput>> {
    parse_jsonl(jsonl)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub documents: Vec<DocId>,
    pub chunks: usize,
    pub observations: usize,
}

#[derive(Debug)]
pub struct KnowledgeBase {
    corpus: Corpus,
    tree: CfrTree,
    decisions: Vec<AlignmentDecision>,
    chunk_cfg: ChunkConfig,
    normalizer: Normalizer,
}

impl KnowledgeBase {
    pub fn in_memory(chunk_cfg: ChunkConfig) -> Result<Self> {
        chunk_cfg.validate()?;
        Ok(KnowledgeBase { corpus: Corpus::in_memory(), tree: CfrTree::default_tree(), decisions: Vec::new(), chunk_cfg, normalizer: Normalizer::default() })
    }

    /// Opens the store under `dir`, along with any saved CFR manifest and
    /// alignment decisions.
    pub fn open(dir: impl Into<PathBuf>, chunk_cfg: ChunkConfig) -> Result<Self> {
        chunk_cfg.validate()?;
        let dir = dir.into();
        let corpus = Corpus::open(&dir)?;
        let read = |name: &str| -> Result<Option<String>> {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(s) => Ok(Some(s)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(source) => Err(CorpusError::Io { path, source }.into()),
            }
        };
        let tree = match read(MANIFEST_FILE)? {
            Some(m) => load_cfr_tree(&m)?,
            None => CfrTree::default_tree(),
        };
        let decisions = match read(DECISIONS_FILE)? {
            Some(text) => parse_decisions(&text).map_err(|source| KbError::Json { line: 0, source })?,
            None => Vec::new(),
        };
        Ok(KnowledgeBase { corpus, tree, decisions, chunk_cfg, normalizer: Normalizer::default() })
    }

    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Self {
        self.normalizer = normalizer;
        self
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn tree(&self) -> &CfrTree {
        &self.tree
    }

    pub fn chunk_config(&self) -> &ChunkConfig {
        &self.chunk_cfg
    }

    pub fn decisions(&self) -> &[AlignmentDecision] {
        &self.decisions
    }

    pub fn stats(&self) -> CorpusStats {
        self.corpus.corpus_stats()
    }

    pub fn risk_report(&self, filter: &RiskFilter) -> RiskReport {
        risk_profile(self.corpus.observations(), &self.tree, filter)
    }

    /// Stores and chunks a batch of regulatory or Form 483 documents. The
    /// whole batch is validated before anything is written.
    pub fn ingest_documents(&mut self, kind: DocKind, inputs: Vec<DocumentInput>) -> Result<IngestReport> {
        if kind == DocKind::QA {
            return Err(IngestError::WrongKind { expected: DocKind::Regulatory, actual: kind }.into());
        }
        let mut docs = Vec::with_capacity(inputs.len());
        let mut chunk_batch: Vec<(DocId, Vec<Chunk>)> = Vec::new();
        let mut obs_batch = Vec::new();
        for input in inputs {
            if input.body.trim().is_empty() {
                return Err(CorpusError::EmptyBody.into());
            }
            let doc = SourceDocument::new(kind, input.title, input.body, input.source_uri, input.verified);
            let chunks = match kind {
                DocKind::Form483 => {
                    obs_batch.push((doc.doc_id.clone(), parse_483(&doc, &self.chunk_cfg, &self.tree)?));
                    chunk_483(&doc.doc_id, &doc.body, &self.chunk_cfg)?
                }
                _ => chunk_regulatory(&doc.doc_id, &doc.body, &self.chunk_cfg),
            };
            chunk_batch.push((doc.doc_id.clone(), chunks));
            docs.push(doc);
        }
        let ids = self.corpus.put_documents(docs)?;
        let report = IngestReport {
            documents: ids,
            chunks: chunk_batch.iter().map(|(_, c)| c.len()).sum(),
            observations: obs_batch.iter().map(|(_, o): &(DocId, Vec<_>)| o.len()).sum(),
        };
        self.corpus.set_chunks_many(chunk_batch)?;
        if !obs_batch.is_empty() {
            self.corpus.set_observations(obs_batch)?;
            self.rebuild_registry()?;
        }
        Ok(report)
    }

    /// Stores one Q&A document holding all `pairs`, one chunk per pair.
    pub fn ingest_qa(&mut self, title: &str, pairs: &[QaPair]) -> Result<IngestReport> {
        if pairs.is_empty() {
            return Err(KbError::EmptyPayload);
        }
        let doc = SourceDocument::new(DocKind::QA, title, qa_body(pairs), "", true);
        let chunks = chunk_qa(&doc.doc_id, pairs)?;
        let id = self.corpus.put_document(doc)?;
        let n = chunks.len();
        self.corpus.set_chunks(&id, chunks)?;
        Ok(IngestReport { documents: vec![id], chunks: n, observations: 0 })
    }

    pub fn ingest_qa_jsonl(&mut self, title: &str, jsonl: &str) -> Result<IngestReport> {
        let pairs = parse_qa_jsonl(jsonl).map_err(|source| KbError::Json { line: source.line(), source })?;
        self.ingest_qa(title, &pairs)
    }

    /// Replaces the CFR part tree and re-maps every observation against it.
    pub fn set_cfr_manifest(&mut self, manifest: &str) -> Result<usize> {
        let tree = load_cfr_tree(manifest)?;
        let form483: Vec<SourceDocument> = self.corpus.documents().filter(|d| d.kind == DocKind::Form483).cloned().collect();
        let mut batch = Vec::with_capacity(form483.len());
        for doc in &form483 {
            batch.push((doc.doc_id.clone(), parse_483(doc, &self.chunk_cfg, &tree)?));
        }
        if let Some(root) = self.corpus.root() {
            write_atomic(&root.join(MANIFEST_FILE), tree.to_manifest().as_bytes())?;
        }
        self.tree = tree;
        if !batch.is_empty() {
            self.corpus.set_observations(batch)?;
            self.rebuild_registry()?;
        }
        Ok(self.tree.len())
    }

    /// Entity groups proposed from every firm and inspector name on file.
    pub fn proposals(&self) -> Vec<GroupProposal> {
        let mut forms = Vec::new();
        for obs in self.corpus.observations() {
            if let Some(f) = &obs.firm {
                forms.push((f.clone(), EntityKind::Firm));
            }
            forms.extend(obs.inspectors.iter().map(|i| (i.clone(), EntityKind::Inspector)));
        }
        propose_groups(&forms, &self.normalizer)
    }

    /// Appends decisions and rebuilds the registry. On error nothing changes.
    pub fn apply_decisions(&mut self, new: Vec<AlignmentDecision>) -> Result<usize> {
        let mut all = self.decisions.clone();
        all.extend(new);
        let registry = apply_alignment(&self.proposals(), &all)?;
        if let Some(root) = self.corpus.root() {
            let mut text = String::new();
            for d in &all {
                text.push_str(&serde_json::to_string(d).expect("decision serializes"));
                text.push('\n');
            }
            write_atomic(&root.join(DECISIONS_FILE), text.as_bytes())?;
        }
        self.decisions = all;
        let groups = registry.groups.len();
        self.corpus.set_registry(registry)?;
        Ok(groups)
    }

    pub fn apply_decisions_jsonl(&mut self, jsonl: &str) -> Result<usize> {
        let decisions = parse_decisions(jsonl).map_err(|source| KbError::Json { line: source.line(), source })?;
        if decisions.is_empty() {
            return Err(KbError::EmptyPayload);
        }
        self.apply_decisions(decisions)
    }

    /// Recomputes entity groups from the current observations and decisions.
    pub fn rebuild_registry(&mut self) -> Result<()> {
        let registry = apply_alignment(&self.proposals(), &self.decisions)?;
        self.corpus.set_registry(registry)?;
        Ok(())
    }

    /// Indexes every stored chunk.
    pub fn build_snapshot(&self, embedder: &dyn Embedder) -> Result<IndexSnapshot> {
        let chunks: Vec<Chunk> = self.corpus.all_chunks().cloned().collect();
        Ok(index_chunks(&chunks, embedder)?)
    }

    /// Writes the snapshot next to the store. No-op for in-memory bases.
    pub fn save_snapshot(&self, snapshot: &IndexSnapshot) -> Result<()> {
        if let Some(root) = self.corpus.root() {
            let bytes = serde_json::to_vec(snapshot).expect("snapshot serializes");
            write_atomic(&root.join(INDEX_FILE), &bytes)?;
        }
        Ok(())
    }

    /// True when `snapshot` was built by `embedder` over exactly the stored
    /// chunks.
    pub fn is_current(&self, snapshot: &IndexSnapshot, embedder: &dyn Embedder) -> bool {
        let mut chunks: Vec<&Chunk> = self.corpus.all_chunks().collect();
        chunks.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
        snapshot.embedder_id == embedder.id()
            && snapshot.entries.len() == chunks.len()
            && snapshot.entries.iter().zip(chunks).all(|(e, c)| e.chunk_id == c.chunk_id && e.text == c.text)
    }

    /// The saved snapshot if it is current, otherwise a fresh build.
    pub fn snapshot(&self, embedder: &dyn Embedder) -> Result<IndexSnapshot> {
        if let Some(root) = self.corpus.root() {
            let path = root.join(INDEX_FILE);
            if let Ok(bytes) = fs::read(&path) {
                match serde_json::from_slice::<IndexSnapshot>(&bytes) {
                    Ok(snap) if self.is_current(&snap, embedder) => return Ok(snap),
                    Ok(_) => tracing::info!("saved index is stale, rebuilding"),
                    Err(e) => tracing::warn!("ignoring unreadable index {}: {e}", path.display()),
                }
            }
        }
        self.build_snapshot(embedder)
    }
}
