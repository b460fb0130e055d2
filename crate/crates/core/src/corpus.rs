//! Document store: source documents, their chunks, Form 483 observations and
//! the entity registry, persisted as JSON-lines files in a single directory.
//!
//! Every mutation rewrites the affected file through a temporary file and a
//! rename, so a concurrent reader sees either the old or the new manifest and
//! never a half-written document.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::CfrRef;
use crate::ingest::{EntityKind, EntityRegistry};
use crate::text::{char_len, char_slice, digest_hex};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("document body is empty")]
    EmptyBody,
    #[error("document {0} already stored with different content")]
    DuplicateIdWithDifferentContent(DocId),
    #[error("unknown document {0}")]
    UnknownDocument(DocId),
    #[error("document {doc} has kind {actual}, expected {expected}")]
    WrongKind { doc: DocId, expected: DocKind, actual: DocKind },
    #[error("invalid chunk: {0}")]
    InvalidChunk(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed record in {path} line {line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Corpus kind. Fixed at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DocKind {
    Regulatory,
    Form483,
    QA,
}

impl DocKind {
    pub const ALL: [DocKind; 3] = [DocKind::Regulatory, DocKind::Form483, DocKind::QA];

    fn manifest_name(self) -> &'static str {
        match self {
            DocKind::Regulatory => "documents.regulatory.jsonl",
            DocKind::Form483 => "documents.form483.jsonl",
            DocKind::QA => "documents.qa.jsonl",
        }
    }
}

impl fmt::Display for DocKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DocKind::Regulatory => "Regulatory",
            DocKind::Form483 => "Form483",
            DocKind::QA => "QA",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocId(pub String);

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkId(pub String);

impl ChunkId {
    pub fn for_seq(doc: &DocId, seq: usize) -> Self {
        ChunkId(format!("{doc}-c{seq:04}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: DocId,
    pub kind: DocKind,
    pub title: String,
    pub body: String,
    pub source_uri: String,
    pub verified: bool,
    pub ingested_at: DateTime<Utc>,
}

impl SourceDocument {
    /// Builds a document whose id is the digest of `(kind, title, body)`.
    pub fn new(kind: DocKind, title: impl Into<String>, body: impl Into<String>, source_uri: impl Into<String>, verified: bool) -> Self {
        let title = title.into();
        let body = body.into();
        SourceDocument {
            doc_id: Self::derive_id(kind, &title, &body),
            kind,
            title,
            body,
            source_uri: source_uri.into(),
            verified,
            ingested_at: Utc::now(),
        }
    }

    pub fn derive_id(kind: DocKind, title: &str, body: &str) -> DocId {
        let digest = digest_hex(&[&kind.to_string(), title, body]);
        DocId(format!("doc-{}", &digest[..20]))
    }

    fn same_content(&self, other: &SourceDocument) -> bool {
        self.kind == other.kind && self.title == other.title && self.body == other.body
    }
}

/// A retrieval unit cut from a document body.
///
/// `char_span` is in characters and `text` always equals that slice of the
/// parent body. For regulatory chunks the first `overlap_chars` characters
/// repeat the tail of the previous chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: ChunkId,
    pub doc_id: DocId,
    pub kind: DocKind,
    pub text: String,
    pub char_span: (usize, usize),
    pub seq: usize,
    #[serde(default)]
    pub overlap_chars: usize,
}

impl Chunk {
    /// The chunk text without its copied overlap prefix.
    pub fn own_text(&self) -> &str {
        char_slice(&self.text, self.overlap_chars, usize::MAX)
    }
}

/// One Form 483 observation item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub obs_id: String,
    pub doc_id: DocId,
    /// The chunk holding this observation's text.
    pub chunk_id: ChunkId,
    pub text: String,
    pub cited_refs: Vec<CfrRef>,
    /// Raw firm name as printed on the form.
    pub firm: Option<String>,
    /// Raw inspector names as printed on the form.
    pub inspectors: Vec<String>,
    pub inspected_on: Option<NaiveDate>,
    pub firm_group: Option<String>,
    pub inspector_groups: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub regulatory: u64,
    pub form483: u64,
    pub qa: u64,
}

impl KindCounts {
    pub fn bump(&mut self, kind: DocKind, by: u64) {
        match kind {
            DocKind::Regulatory => self.regulatory += by,
            DocKind::Form483 => self.form483 += by,
            DocKind::QA => self.qa += by,
        }
    }

    pub fn get(&self, kind: DocKind) -> u64 {
        match kind {
            DocKind::Regulatory => self.regulatory,
            DocKind::Form483 => self.form483,
            DocKind::QA => self.qa,
        }
    }

    pub fn total(&self) -> u64 {
        self.regulatory + self.form483 + self.qa
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: KindCounts,
    pub unverified_documents: u64,
    pub observation_count: u64,
    pub firm_group_count: u64,
    pub inspector_group_count: u64,
    pub chunks: KindCounts,
}

/// A referential-integrity violation found by [`Corpus::audit`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditIssue(pub String);

const CHUNKS_FILE: &str = "chunks.jsonl";
const OBSERVATIONS_FILE: &str = "observations.jsonl";
const ENTITIES_FILE: &str = "entities.json";

/// The document store. `root == None` keeps everything in memory.
#[derive(Debug, Default)]
pub struct Corpus {
    root: Option<PathBuf>,
    docs: BTreeMap<DocId, SourceDocument>,
    chunks: BTreeMap<DocId, Vec<Chunk>>,
    observations: BTreeMap<String, Observation>,
    registry: EntityRegistry,
}

impl Corpus {
    pub fn in_memory() -> Self {
        Corpus::default()
    }

    /// Opens (or creates) a store rooted at `dir`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|source| CorpusError::Io { path: root.clone(), source })?;
        let mut corpus = Corpus { root: Some(root.clone()), ..Corpus::default() };
        for kind in DocKind::ALL {
            for doc in read_jsonl::<SourceDocument>(&root.join(kind.manifest_name()))? {
                corpus.docs.insert(doc.doc_id.clone(), doc);
            }
        }
        for chunk in read_jsonl::<Chunk>(&root.join(CHUNKS_FILE))? {
            corpus.chunks.entry(chunk.doc_id.clone()).or_default().push(chunk);
        }
        for list in corpus.chunks.values_mut() {
            list.sort_by_key(|c| c.seq);
        }
        for obs in read_jsonl::<Observation>(&root.join(OBSERVATIONS_FILE))? {
            corpus.observations.insert(obs.obs_id.clone(), obs);
        }
        let entities = root.join(ENTITIES_FILE);
        if entities.exists() {
            let raw = fs::read_to_string(&entities).map_err(|source| CorpusError::Io { path: entities.clone(), source })?;
            corpus.registry = serde_json::from_str(&raw).map_err(|source| CorpusError::Json { path: entities, line: 1, source })?;
        }
        Ok(corpus)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Stores a document. Re-submitting identical content is a no-op.
    pub fn put_document(&mut self, doc: SourceDocument) -> Result<DocId> {
        let kind = doc.kind;
        let (id, changed) = self.insert_document(doc)?;
        if changed {
            self.persist_manifest(kind)?;
        }
        Ok(id)
    }

    /// Stores several documents and persists each touched manifest once.
    ///
    /// Validation runs over the whole batch first so a failing entry leaves
    /// the store untouched.
    pub fn put_documents(&mut self, docs: Vec<SourceDocument>) -> Result<Vec<DocId>> {
        let mut pending: BTreeMap<DocId, &SourceDocument> = BTreeMap::new();
        for doc in &docs {
            self.check_document(doc)?;
            if let Some(prev) = pending.insert(doc.doc_id.clone(), doc) {
                if !prev.same_content(doc) {
                    return Err(CorpusError::DuplicateIdWithDifferentContent(doc.doc_id.clone()));
                }
            }
        }
        let mut touched = Vec::new();
        let mut ids = Vec::with_capacity(docs.len());
        for doc in docs {
            let kind = doc.kind;
            let (id, changed) = self.insert_document(doc)?;
            if changed && !touched.contains(&kind) {
                touched.push(kind);
            }
            ids.push(id);
        }
        for kind in touched {
            self.persist_manifest(kind)?;
        }
        Ok(ids)
    }

    fn check_document(&self, doc: &SourceDocument) -> Result<()> {
        if doc.body.is_empty() {
            return Err(CorpusError::EmptyBody);
        }
        if let Some(existing) = self.docs.get(&doc.doc_id) {
            if !existing.same_content(doc) {
                return Err(CorpusError::DuplicateIdWithDifferentContent(doc.doc_id.clone()));
            }
        }
        Ok(())
    }

    fn insert_document(&mut self, doc: SourceDocument) -> Result<(DocId, bool)> {
        self.check_document(&doc)?;
        let id = doc.doc_id.clone();
        if self.docs.contains_key(&id) {
            return Ok((id, false));
        }
        self.docs.insert(id.clone(), doc);
        Ok((id, true))
    }

    pub fn get_document(&self, id: &DocId) -> Option<&SourceDocument> {
        self.docs.get(id)
    }

    pub fn documents(&self) -> impl Iterator<Item = &SourceDocument> {
        self.docs.values()
    }

    /// Chunks of a document in `seq` order; empty if it has not been chunked.
    pub fn get_chunks(&self, id: &DocId) -> Result<&[Chunk]> {
        if !self.docs.contains_key(id) {
            return Err(CorpusError::UnknownDocument(id.clone()));
        }
        Ok(self.chunks.get(id).map(Vec::as_slice).unwrap_or(&[]))
    }

    pub fn all_chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.chunks.values().flatten()
    }

    pub fn find_chunk(&self, id: &ChunkId) -> Option<&Chunk> {
        // Chunk ids embed their document id as a prefix.
        let (doc, _) = id.0.rsplit_once("-c")?;
        self.chunks.get(&DocId(doc.to_string()))?.iter().find(|c| &c.chunk_id == id)
    }

    /// Replaces the chunk list of one document.
    pub fn set_chunks(&mut self, id: &DocId, chunks: Vec<Chunk>) -> Result<()> {
        self.stage_chunks(id, chunks)?;
        self.persist_chunks()
    }

    /// Replaces chunk lists for several documents with a single write.
    pub fn set_chunks_many(&mut self, batch: Vec<(DocId, Vec<Chunk>)>) -> Result<()> {
        for (id, chunks) in &batch {
            self.validate_chunks(id, chunks)?;
        }
        for (id, chunks) in batch {
            self.chunks.insert(id, chunks);
        }
        self.persist_chunks()
    }

    fn stage_chunks(&mut self, id: &DocId, chunks: Vec<Chunk>) -> Result<()> {
        self.validate_chunks(id, &chunks)?;
        self.chunks.insert(id.clone(), chunks);
        Ok(())
    }

    fn validate_chunks(&self, id: &DocId, chunks: &[Chunk]) -> Result<()> {
        let doc = self.docs.get(id).ok_or_else(|| CorpusError::UnknownDocument(id.clone()))?;
        for (i, chunk) in chunks.iter().enumerate() {
            if let Some(problem) = chunk_problem(doc, chunk, i) {
                return Err(CorpusError::InvalidChunk(problem));
            }
        }
        Ok(())
    }

    /// Replaces all observations belonging to the documents in `batch`.
    pub fn set_observations(&mut self, batch: Vec<(DocId, Vec<Observation>)>) -> Result<()> {
        for (id, list) in &batch {
            let doc = self.docs.get(id).ok_or_else(|| CorpusError::UnknownDocument(id.clone()))?;
            if doc.kind != DocKind::Form483 {
                return Err(CorpusError::WrongKind { doc: id.clone(), expected: DocKind::Form483, actual: doc.kind });
            }
            if let Some(obs) = list.iter().find(|o| &o.doc_id != id) {
                return Err(CorpusError::InvalidChunk(format!("observation {} does not belong to {id}", obs.obs_id)));
            }
        }
        for (id, list) in batch {
            self.observations.retain(|_, o| o.doc_id != id);
            for obs in list {
                self.observations.insert(obs.obs_id.clone(), obs);
            }
        }
        self.persist_observations()
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.observations.values()
    }

    pub fn registry(&self) -> &EntityRegistry {
        &self.registry
    }

    /// Installs a new registry and re-links every observation to its groups.
    pub fn set_registry(&mut self, registry: EntityRegistry) -> Result<()> {
        for obs in self.observations.values_mut() {
            obs.firm_group = obs.firm.as_deref().and_then(|f| registry.group_of(f, EntityKind::Firm)).map(str::to_string);
            obs.inspector_groups = obs
                .inspectors
                .iter()
                .filter_map(|i| registry.group_of(i, EntityKind::Inspector))
                .map(str::to_string)
                .collect();
            obs.inspector_groups.sort();
            obs.inspector_groups.dedup();
        }
        self.registry = registry;
        self.persist_observations()?;
        self.persist_registry()
    }

    pub fn corpus_stats(&self) -> CorpusStats {
        let mut stats = CorpusStats::default();
        for doc in self.docs.values() {
            stats.documents.bump(doc.kind, 1);
            if !doc.verified {
                stats.unverified_documents += 1;
            }
        }
        for chunk in self.all_chunks() {
            stats.chunks.bump(chunk.kind, 1);
        }
        stats.observation_count = self.observations.len() as u64;
        stats.firm_group_count = self.registry.count(EntityKind::Firm) as u64;
        stats.inspector_group_count = self.registry.count(EntityKind::Inspector) as u64;
        stats
    }

    /// Store-wide referential-integrity check. Empty means consistent.
    pub fn audit(&self) -> Vec<AuditIssue> {
        let mut issues = Vec::new();
        for (id, chunks) in &self.chunks {
            match self.docs.get(id) {
                None => issues.push(AuditIssue(format!("chunks reference missing document {id}"))),
                Some(doc) => {
                    for (i, chunk) in chunks.iter().enumerate() {
                        if let Some(problem) = chunk_problem(doc, chunk, i) {
                            issues.push(AuditIssue(problem));
                        }
                    }
                }
            }
        }
        for obs in self.observations.values() {
            match self.docs.get(&obs.doc_id) {
                None => issues.push(AuditIssue(format!("observation {} references missing document {}", obs.obs_id, obs.doc_id))),
                Some(doc) if doc.kind != DocKind::Form483 => {
                    issues.push(AuditIssue(format!("observation {} attached to {} document", obs.obs_id, doc.kind)))
                }
                Some(_) => {}
            }
            for r in &obs.cited_refs {
                if CfrRef::parse(&r.source).as_ref() != Some(r) {
                    issues.push(AuditIssue(format!("observation {} citation {:?} does not re-parse", obs.obs_id, r.source)));
                }
            }
            if let Some(g) = &obs.firm_group {
                if !self.registry.contains(g) {
                    issues.push(AuditIssue(format!("observation {} references missing group {g}", obs.obs_id)));
                }
            }
        }
        issues
    }

    fn persist_manifest(&self, kind: DocKind) -> Result<()> {
        let Some(root) = &self.root else { return Ok(()) };
        write_jsonl(&root.join(kind.manifest_name()), self.docs.values().filter(|d| d.kind == kind))
    }

    fn persist_chunks(&self) -> Result<()> {
        let Some(root) = &self.root else { return Ok(()) };
        write_jsonl(&root.join(CHUNKS_FILE), self.all_chunks())
    }

    fn persist_observations(&self) -> Result<()> {
        let Some(root) = &self.root else { return Ok(()) };
        write_jsonl(&root.join(OBSERVATIONS_FILE), self.observations.values())
    }

    fn persist_registry(&self) -> Result<()> {
        let Some(root) = &self.root else { return Ok(()) };
        let path = root.join(ENTITIES_FILE);
        let body = serde_json::to_vec_pretty(&self.registry).expect("registry serializes");
        write_atomic(&path, &body)
    }
}

fn chunk_problem(doc: &SourceDocument, chunk: &Chunk, index: usize) -> Option<String> {
    let id = &chunk.chunk_id;
    if chunk.doc_id != doc.doc_id {
        return Some(format!("chunk {id} parent {} != {}", chunk.doc_id, doc.doc_id));
    }
    if chunk.kind != doc.kind {
        return Some(format!("chunk {id} kind {} != document kind {}", chunk.kind, doc.kind));
    }
    if chunk.seq != index {
        return Some(format!("chunk {id} has seq {} at position {index}", chunk.seq));
    }
    let (start, end) = chunk.char_span;
    if end <= start || end > char_len(&doc.body) {
        return Some(format!("chunk {id} has invalid span {start}..{end}"));
    }
    if char_slice(&doc.body, start, end) != chunk.text {
        return Some(format!("chunk {id} text differs from parent body at {start}..{end}"));
    }
    None
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(CorpusError::Io { path: path.to_path_buf(), source }),
    };
    let mut out = Vec::new();
    for (n, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| CorpusError::Json { path: path.to_path_buf(), line: n + 1, source })?;
        out.push(record);
    }
    Ok(out)
}

fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, records: impl Iterator<Item = &'a T>) -> Result<()> {
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record).expect("records serialize");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(io_err)?;
    file.write_all(bytes).map_err(io_err)?;
    file.sync_all().map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}
