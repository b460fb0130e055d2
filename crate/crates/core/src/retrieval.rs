//! Hybrid retrieval: BM25 keyword search and exhaustive cosine search over an
//! immutable snapshot, min-max weighted fusion, re-ranking, then a re-rank
//! score threshold and a top-k cut.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Chunk, ChunkId, DocId, DocKind};
use crate::http::{HttpError, JsonClient};
use crate::text::{digest_hex, tokenize};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const DEFAULT_DIM: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("text is empty")]
    EmptyText,
    #[error("duplicate chunk id {0}")]
    DuplicateChunkId(ChunkId),
    #[error("embedding dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
}

impl From<HttpError> for RetrievalError {
    fn from(e: HttpError) -> Self {
        RetrievalError::BackendUnavailable(e.to_string())
    }
}

pub type Result<T, E = RetrievalError> = std::result::Result<T, E>;

/// Unit-norm dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    fn normalized(mut values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(RetrievalError::EmptyText);
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Embedding { values })
    }
}

pub trait Embedder: Send + Sync {
    /// Stable identifier, recorded in snapshots.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Deterministic hashed bag-of-words embedder (FNV-1a into `dim` buckets).
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: DEFAULT_DIM }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        HashingEmbedder { dim: dim.max(1) }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> String {
        format!("hashing-fnv1a-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            // Punctuation-only text: fall back to its characters.
            tokens = text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect();
        }
        let mut values = vec![0.0; self.dim];
        for t in &tokens {
            values[(fnv1a64(t.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        Embedding::normalized(values)
    }
}

/// Embedder behind `POST {"texts":[...]} -> {"vectors":[[...]]}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    client: JsonClient,
    dim: usize,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, timeout: Duration, dim: usize) -> Self {
        RemoteEmbedder { client: JsonClient::new(url, timeout), dim }
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote-{}-{}", self.client.url(), self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(RetrievalError::EmptyText);
        }
        let response: EmbedResponse = self.client.post(&EmbedRequest { texts })?;
        if response.vectors.len() != texts.len() {
            return Err(RetrievalError::BackendUnavailable(format!("expected {} vectors, got {}", texts.len(), response.vectors.len())));
        }
        response
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(RetrievalError::DimensionMismatch { expected: self.dim, got: v.len() });
                }
                Embedding::normalized(v)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedChunk {
    pub chunk_id: ChunkId,
    pub doc_id: DocId,
    pub kind: DocKind,
    pub text: String,
    /// Token count, the BM25 document length.
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub entry: u32,
    pub tf: u32,
}

/// Immutable search snapshot. Entries are sorted by chunk id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSnapshot {
    pub id: String,
    pub embedder_id: String,
    pub dim: usize,
    pub entries: Vec<IndexedChunk>,
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub avg_len: f64,
    /// One vector per entry; all-zero for chunks with no text to embed.
    pub vectors: Vec<Embedding>,
}

impl IndexSnapshot {
    pub fn empty(embedder: &dyn Embedder) -> Self {
        index_chunks(&[], embedder).expect("empty index always builds")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, id: &ChunkId) -> Option<usize> {
        self.entries.binary_search_by(|e| e.chunk_id.cmp(id)).ok()
    }

    pub fn entry(&self, id: &ChunkId) -> Option<&IndexedChunk> {
        self.position(id).map(|i| &self.entries[i])
    }

    fn admits(&self, i: usize, filter: Option<DocKind>) -> bool {
        filter.is_none_or(|k| self.entries[i].kind == k)
    }

    /// BM25 score of every entry for `query`; zero for entries sharing no
    /// term. Terms are summed in sorted order.
    pub fn bm25_scores(&self, query: &str) -> Vec<f64> {
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let n = self.entries.len() as f64;
        let avg_len = if self.avg_len > 0.0 { self.avg_len } else { 1.0 };
        let mut scores = vec![0.0; self.entries.len()];
        for term in &terms {
            let Some(postings) = self.postings.get(term) else { continue };
            let df = postings.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for p in postings {
                let tf = f64::from(p.tf);
                let len = self.entries[p.entry as usize].length as f64;
                scores[p.entry as usize] += idf * (tf * (BM25_K1 + 1.0)) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * len / avg_len));
            }
        }
        scores
    }
}

/// Builds a snapshot: inverted index over case-folded Unicode words plus
/// one embedding per chunk.
pub fn index_chunks(chunks: &[Chunk], embedder: &dyn Embedder) -> Result<IndexSnapshot> {
    let mut sorted: Vec<&Chunk> = chunks.iter().collect();
    sorted.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].chunk_id == w[1].chunk_id) {
        return Err(RetrievalError::DuplicateChunkId(w[0].chunk_id.clone()));
    }

    let mut entries = Vec::with_capacity(sorted.len());
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut total_len = 0usize;
    for (i, chunk) in sorted.iter().enumerate() {
        let tokens = tokenize(&chunk.text);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in &tokens {
            *tf.entry(t.clone()).or_insert(0) += 1;
        }
        for (term, count) in tf {
            postings.entry(term).or_default().push(Posting { entry: i as u32, tf: count });
        }
        total_len += tokens.len();
        entries.push(IndexedChunk {
            chunk_id: chunk.chunk_id.clone(),
            doc_id: chunk.doc_id.clone(),
            kind: chunk.kind,
            text: chunk.text.clone(),
            length: tokens.len(),
        });
    }

    let embeddable: Vec<&str> = entries.iter().map(|e| e.text.as_str()).filter(|t| !t.trim().is_empty()).collect();
    let mut embedded = embedder.embed_batch(&embeddable)?.into_iter();
    let dim = embedder.dim();
    let vectors = entries
        .iter()
        .map(|e| if e.text.trim().is_empty() { Embedding { values: vec![0.0; dim] } } else { embedded.next().expect("one vector per text") })
        .collect();

    let avg_len = if entries.is_empty() { 0.0 } else { total_len as f64 / entries.len() as f64 };
    let mut id_parts: Vec<&str> = vec!["snapshot"];
    let embedder_id = embedder.id();
    id_parts.push(&embedder_id);
    for e in &entries {
        id_parts.push(e.chunk_id.as_str());
        id_parts.push(&e.text);
    }
    let id = format!("snap-{}", &digest_hex(&id_parts)[..16]);
    Ok(IndexSnapshot { id, embedder_id, dim, entries, postings, avg_len, vectors })
}

/// Which stages saw a hit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Present in the keyword candidate list.
    pub keyword: bool,
    /// Present in the vector candidate list.
    pub vector: bool,
    pub fused: bool,
    pub reranked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub chunk_id: ChunkId,
    pub keyword_score: f64,
    pub vector_score: f64,
    pub fused_score: f64,
    pub rerank_score: f64,
    pub provenance: Provenance,
}

impl ScoredHit {
    fn bare(chunk_id: ChunkId) -> Self {
        ScoredHit { chunk_id, keyword_score: 0.0, vector_score: 0.0, fused_score: 0.0, rerank_score: 0.0, provenance: Provenance::default() }
    }
}

fn top_k(mut scored: Vec<(usize, f64)>, snapshot: &IndexSnapshot, k: usize) -> Vec<(usize, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| snapshot.entries[a.0].chunk_id.cmp(&snapshot.entries[b.0].chunk_id)));
    scored.truncate(k);
    scored
}

/// Top-`k` BM25 hits (k1 = 1.2, b = 0.75). Chunks without any query term
/// are never returned. Collection statistics span the whole snapshot even
/// when `filter` restricts the candidates.
pub fn keyword_search(snapshot: &IndexSnapshot, query: &str, k: usize, filter: Option<DocKind>) -> Result<Vec<ScoredHit>> {
    if query.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let scores = snapshot.bm25_scores(query);
    let scored = scores.into_iter().enumerate().filter(|(i, s)| *s > 0.0 && snapshot.admits(*i, filter)).collect();
    Ok(top_k(scored, snapshot, k)
        .into_iter()
        .map(|(i, s)| ScoredHit {
            keyword_score: s,
            provenance: Provenance { keyword: true, ..Provenance::default() },
            ..ScoredHit::bare(snapshot.entries[i].chunk_id.clone())
        })
        .collect())
}

/// Top-`k` by cosine similarity, exhaustive scan.
pub fn vector_search(snapshot: &IndexSnapshot, query: &Embedding, k: usize, filter: Option<DocKind>) -> Result<Vec<ScoredHit>> {
    if query.dim() != snapshot.dim {
        return Err(RetrievalError::DimensionMismatch { expected: snapshot.dim, got: query.dim() });
    }
    let scored = snapshot.vectors.iter().enumerate().filter(|(i, _)| snapshot.admits(*i, filter)).map(|(i, v)| (i, query.dot(v))).collect();
    Ok(top_k(scored, snapshot, k)
        .into_iter()
        .map(|(i, s)| ScoredHit {
            vector_score: s,
            provenance: Provenance { vector: true, ..Provenance::default() },
            ..ScoredHit::bare(snapshot.entries[i].chunk_id.clone())
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub keyword: f64,
    pub vector: f64,
}

/// Min-max normalization within one list. A single element, or a list of
/// equal scores, normalizes to 1.0.
pub fn min_max(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scores.iter().map(|s| if hi > lo { (s - lo) / (hi - lo) } else { 1.0 }).collect()
}

/// Weighted fusion of the keyword and vector candidate lists. Absence from a
/// list contributes 0 for that list.
pub fn fuse(keyword_hits: &[ScoredHit], vector_hits: &[ScoredHit], weights: FusionWeights) -> Vec<ScoredHit> {
    let mut merged: BTreeMap<ChunkId, ScoredHit> = BTreeMap::new();
    let kw_norm = min_max(&keyword_hits.iter().map(|h| h.keyword_score).collect::<Vec<_>>());
    for (hit, norm) in keyword_hits.iter().zip(kw_norm) {
        let entry = merged.entry(hit.chunk_id.clone()).or_insert_with(|| ScoredHit::bare(hit.chunk_id.clone()));
        entry.keyword_score = hit.keyword_score;
        entry.provenance.keyword = true;
        entry.fused_score += weights.keyword * norm;
    }
    let vec_norm = min_max(&vector_hits.iter().map(|h| h.vector_score).collect::<Vec<_>>());
    for (hit, norm) in vector_hits.iter().zip(vec_norm) {
        let entry = merged.entry(hit.chunk_id.clone()).or_insert_with(|| ScoredHit::bare(hit.chunk_id.clone()));
        entry.vector_score = hit.vector_score;
        entry.provenance.vector = true;
        entry.fused_score += weights.vector * norm;
    }
    let mut out: Vec<ScoredHit> = merged
        .into_values()
        .map(|mut h| {
            h.provenance.fused = true;
            h
        })
        .collect();
    out.sort_by(|a, b| b.fused_score.total_cmp(&a.fused_score).then_with(|| a.chunk_id.cmp(&b.chunk_id)));
    out
}

pub trait Reranker: Send + Sync {
    /// One score in `[0, 1]` per text.
    fn score(&self, query: &str, texts: &[&str]) -> Result<Vec<f64>>;
}

/// Fraction of distinct query terms that appear in the chunk.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermOverlapReranker;

impl Reranker for TermOverlapReranker {
    fn score(&self, query: &str, texts: &[&str]) -> Result<Vec<f64>> {
        let q: BTreeSet<String> = tokenize(query).into_iter().collect();
        Ok(texts
            .iter()
            .map(|t| {
                if q.is_empty() {
                    return 0.0;
                }
                let c: BTreeSet<String> = tokenize(t).into_iter().collect();
                q.intersection(&c).count() as f64 / q.len() as f64
            })
            .collect())
    }
}

/// Re-ranker behind `POST {"query","texts"} -> {"scores":[...]}`.
#[derive(Debug, Clone)]
pub struct RemoteReranker {
    client: JsonClient,
}

impl RemoteReranker {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        RemoteReranker { client: JsonClient::new(url, timeout) }
    }
}

#[derive(Serialize)]
struct RerankRequest<'a> {
    query: &'a str,
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct RerankResponse {
    scores: Vec<f64>,
}

impl Reranker for RemoteReranker {
    fn score(&self, query: &str, texts: &[&str]) -> Result<Vec<f64>> {
        let response: RerankResponse = self.client.post(&RerankRequest { query, texts })?;
        if response.scores.len() != texts.len() {
            return Err(RetrievalError::BackendUnavailable(format!("expected {} scores, got {}", texts.len(), response.scores.len())));
        }
        Ok(response.scores.into_iter().map(|s| s.clamp(0.0, 1.0)).collect())
    }
}

/// Assigns re-rank scores and sorts by them (ties: fused score, then id).
/// Hits whose chunk is missing from the snapshot score 0.
pub fn rerank(snapshot: &IndexSnapshot, query: &str, hits: Vec<ScoredHit>, reranker: &dyn Reranker) -> Result<Vec<ScoredHit>> {
    let texts: Vec<&str> = hits.iter().map(|h| snapshot.entry(&h.chunk_id).map_or("", |e| e.text.as_str())).collect();
    let scores = reranker.score(query, &texts)?;
    let mut out: Vec<ScoredHit> = hits
        .into_iter()
        .zip(scores)
        .map(|(mut h, s)| {
            h.rerank_score = s;
            h.provenance.reranked = true;
            h
        })
        .collect();
    out.sort_by(|a, b| {
        b.rerank_score
            .total_cmp(&a.rerank_score)
            .then_with(|| b.fused_score.total_cmp(&a.fused_score))
            .then_with(|| a.chunk_id.cmp(&b.chunk_id))
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k_candidates: usize,
    pub w_kw: f64,
    pub w_vec: f64,
    pub rerank_threshold: f64,
    pub top_k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { k_candidates: 20, w_kw: 0.3, w_vec: 0.7, rerank_threshold: 0.7, top_k: 2 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RetrievalError::InvalidConfig(m.into()));
        if self.w_kw < 0.0 || self.w_vec < 0.0 || (self.w_kw + self.w_vec - 1.0).abs() > 1e-9 {
            return bad("fusion weights must be non-negative and sum to 1");
        }
        if !(0.0..=1.0).contains(&self.rerank_threshold) {
            return bad("rerank_threshold must be in [0, 1]");
        }
        if self.top_k == 0 || self.k_candidates == 0 {
            return bad("top_k and k_candidates must be at least 1");
        }
        Ok(())
    }

    pub fn weights(&self) -> FusionWeights {
        FusionWeights { keyword: self.w_kw, vector: self.w_vec }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub keyword: Vec<ScoredHit>,
    pub vector: Vec<ScoredHit>,
    pub fused: Vec<ScoredHit>,
    pub reranked: Vec<ScoredHit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub filter: Option<DocKind>,
    pub hits: Vec<ScoredHit>,
    pub trace: RetrievalTrace,
}

/// A retrieved chunk as handed to the agent and checklist builder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub chunk_id: ChunkId,
    pub doc_id: DocId,
    pub kind: DocKind,
    pub text: String,
    pub rerank_score: f64,
    pub fused_score: f64,
}

impl RetrievalResult {
    pub fn evidence(&self, snapshot: &IndexSnapshot) -> Vec<Evidence> {
        self.hits
            .iter()
            .filter_map(|h| {
                snapshot.entry(&h.chunk_id).map(|e| Evidence {
                    chunk_id: e.chunk_id.clone(),
                    doc_id: e.doc_id.clone(),
                    kind: e.kind,
                    text: e.text.clone(),
                    rerank_score: h.rerank_score,
                    fused_score: h.fused_score,
                })
            })
            .collect()
    }
}

/// The retrieval services a query needs besides the snapshot.
#[derive(Clone, Copy)]
pub struct Retriever<'a> {
    pub snapshot: &'a IndexSnapshot,
    pub embedder: &'a dyn Embedder,
    pub reranker: &'a dyn Reranker,
}

/// Full pipeline: keyword + vector candidates, fuse, re-rank, drop hits
/// below the threshold, keep `top_k`. Raw scores missing from one candidate
/// list are filled in from the snapshot so every returned hit carries all
/// four scores.
pub fn retrieve(r: Retriever<'_>, query: &str, cfg: &RetrievalConfig, filter: Option<DocKind>) -> Result<RetrievalResult> {
    cfg.validate()?;
    if query.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let snapshot = r.snapshot;
    let keyword = keyword_search(snapshot, query, cfg.k_candidates, filter)?;
    let query_vec = r.embedder.embed(query)?;
    let vector = vector_search(snapshot, &query_vec, cfg.k_candidates, filter)?;
    let mut fused = fuse(&keyword, &vector, cfg.weights());

    let bm25 = snapshot.bm25_scores(query);
    for hit in &mut fused {
        let Some(i) = snapshot.position(&hit.chunk_id) else { continue };
        if !hit.provenance.keyword {
            hit.keyword_score = bm25[i];
        }
        if !hit.provenance.vector {
            hit.vector_score = query_vec.dot(&snapshot.vectors[i]);
        }
    }

    let reranked = rerank(snapshot, query, fused.clone(), r.reranker)?;
    let hits = reranked.iter().filter(|h| h.rerank_score >= cfg.rerank_threshold).take(cfg.top_k).cloned().collect();
    Ok(RetrievalResult { query: query.to_string(), filter, hits, trace: RetrievalTrace { keyword, vector, fused, reranked } })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(id: &str, kind: DocKind, text: &str) -> Chunk {
        Chunk {
            chunk_id: ChunkId(id.into()),
            doc_id: DocId("d".into()),
            kind,
            text: text.into(),
            char_span: (0, text.chars().count()),
            seq: 0,
            overlap_chars: 0,
        }
    }

    fn reg(id: &str, text: &str) -> Chunk {
        chunk(id, DocKind::Regulatory, text)
    }

    #[test]
    fn empty_index_returns_nothing() {
        let snap = IndexSnapshot::empty(&HashingEmbedder::default());
        assert!(keyword_search(&snap, "aseptic", 5, None).unwrap().is_empty());
        let q = HashingEmbedder::default().embed("aseptic").unwrap();
        assert!(vector_search(&snap, &q, 5, None).unwrap().is_empty());
        let r = Retriever { snapshot: &snap, embedder: &HashingEmbedder::default(), reranker: &TermOverlapReranker };
        assert!(retrieve(r, "aseptic", &RetrievalConfig::default(), None).unwrap().hits.is_empty());
    }

    #[test]
    fn index_structure_and_duplicates() {
        let chunks = vec![reg("a", "aseptic fill"), reg("b", "air filtration"), reg("c", "written procedures")];
        let snap = index_chunks(&chunks, &HashingEmbedder::default()).unwrap();
        assert_eq!(snap.entries.len(), 3);
        assert_eq!(snap.vectors.len(), 3);
        let dup = vec![reg("a", "x"), reg("a", "y")];
        assert_eq!(index_chunks(&dup, &HashingEmbedder::default()), Err(RetrievalError::DuplicateChunkId(ChunkId("a".into()))));
    }

    #[test]
    fn unique_term_ranks_first_and_empty_query_errors() {
        let chunks = vec![reg("a", "gowning practices"), reg("b", "sterility assurance"), reg("c", "gowning and sterility")];
        let snap = index_chunks(&chunks, &HashingEmbedder::default()).unwrap();
        let hits = keyword_search(&snap, "assurance", 3, None).unwrap();
        assert_eq!(hits[0].chunk_id, ChunkId("b".into()));
        assert_eq!(hits.len(), 1);
        assert_eq!(keyword_search(&snap, "  ", 3, None), Err(RetrievalError::EmptyQuery));
    }

    #[test]
    fn embedding_is_deterministic_and_unit_norm() {
        let e = HashingEmbedder::default();
        let a = e.embed("Control of microbiological contamination").unwrap();
        assert_eq!(a, e.embed("Control of microbiological contamination").unwrap());
        assert!((a.norm() - 1.0).abs() <= 1e-6);
        assert!((e.embed("§§ --").unwrap().norm() - 1.0).abs() <= 1e-6);
        assert_eq!(e.embed("   "), Err(RetrievalError::EmptyText));
    }

    #[test]
    fn self_similarity_is_one() {
        let e = HashingEmbedder::default();
        let chunks = vec![reg("a", "aseptic processing areas"), reg("b", "ventilation air filtration"), reg("c", "batch records")];
        let snap = index_chunks(&chunks, &e).unwrap();
        let q = snap.vectors[1].clone();
        let hits = vector_search(&snap, &q, 3, None).unwrap();
        assert_eq!(hits[0].chunk_id, ChunkId("b".into()));
        assert!((hits[0].vector_score - 1.0).abs() <= 1e-6);
        let wrong = Embedding { values: vec![1.0; 8] };
        assert_eq!(vector_search(&snap, &wrong, 3, None), Err(RetrievalError::DimensionMismatch { expected: 64, got: 8 }));
    }

    fn kw(id: &str, s: f64) -> ScoredHit {
        ScoredHit { keyword_score: s, ..ScoredHit::bare(ChunkId(id.into())) }
    }

    fn vs(id: &str, s: f64) -> ScoredHit {
        ScoredHit { vector_score: s, ..ScoredHit::bare(ChunkId(id.into())) }
    }

    #[test]
    fn fusion_degenerate_weights_follow_keyword_order() {
        let k = vec![kw("b", 3.0), kw("a", 2.0), kw("c", 1.0)];
        let v = vec![vs("c", 0.9), vs("a", 0.5)];
        let fused = fuse(&k, &v, FusionWeights { keyword: 1.0, vector: 0.0 });
        let order: Vec<&str> = fused.iter().map(|h| h.chunk_id.as_str()).collect();
        assert_eq!(order, vec!["b", "a", "c"]);
    }

    #[test]
    fn absence_contributes_zero() {
        let fused = fuse(&[], &[vs("x", 0.4)], FusionWeights { keyword: 0.3, vector: 0.7 });
        assert!((fused[0].fused_score - 0.7).abs() < 1e-12);
    }

    #[test]
    fn term_overlap_reranker() {
        let r = TermOverlapReranker;
        let s = r.score("aseptic gowning validation", &["Aseptic gowning validation program", "unrelated text", "aseptic gowning only"]).unwrap();
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], 0.0);
        assert!((s[2] - 2.0 / 3.0).abs() < 1e-12);
    }

    struct Fixed(Vec<f64>);

    impl Reranker for Fixed {
        fn score(&self, _: &str, texts: &[&str]) -> Result<Vec<f64>> {
            Ok(self.0.iter().copied().take(texts.len()).collect())
        }
    }

    #[test]
    fn threshold_and_top_k_cut() {
        let e = HashingEmbedder::default();
        let chunks = vec![reg("a", "alpha"), reg("b", "alpha beta"), reg("c", "alpha beta gamma")];
        let snap = index_chunks(&chunks, &e).unwrap();
        let reranker = Fixed(vec![0.69, 0.9, 0.71]);
        let r = Retriever { snapshot: &snap, embedder: &e, reranker: &reranker };
        let result = retrieve(r, "alpha", &RetrievalConfig::default(), None).unwrap();
        let scores: Vec<f64> = result.hits.iter().map(|h| h.rerank_score).collect();
        assert_eq!(scores, vec![0.9, 0.71]);

        let low = Fixed(vec![0.1, 0.2, 0.3]);
        let r = Retriever { snapshot: &snap, embedder: &e, reranker: &low };
        assert!(retrieve(r, "alpha", &RetrievalConfig::default(), None).unwrap().hits.is_empty());
    }

    #[test]
    fn kind_filter_restricts_candidates() {
        let e = HashingEmbedder::default();
        let chunks = vec![reg("a", "aseptic processing"), chunk("b", DocKind::Form483, "aseptic processing deficiency")];
        let snap = index_chunks(&chunks, &e).unwrap();
        let r = Retriever { snapshot: &snap, embedder: &e, reranker: &TermOverlapReranker };
        let res = retrieve(r, "aseptic processing", &RetrievalConfig::default(), Some(DocKind::Form483)).unwrap();
        assert_eq!(res.hits.len(), 1);
        assert_eq!(res.hits[0].chunk_id, ChunkId("b".into()));
    }

    #[test]
    fn config_validation() {
        assert!(RetrievalConfig::default().validate().is_ok());
        assert!(RetrievalConfig { w_kw: 0.5, ..RetrievalConfig::default() }.validate().is_err());
        assert!(RetrievalConfig { top_k: 0, ..RetrievalConfig::default() }.validate().is_err());
    }

    #[test]
    fn unreachable_remote_embedder_is_unavailable() {
        let e = RemoteEmbedder::new("http://127.0.0.1:9/embed", Duration::from_millis(300), 64);
        assert!(matches!(e.embed("x"), Err(RetrievalError::BackendUnavailable(_))));
    }
}
