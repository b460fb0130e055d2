//! Turning raw corpus text into chunks, observations and entity groups.
//!
//! Three chunkers, one per corpus kind:
//!
//! - regulatory text is split on blank lines and packed greedily into
//!   windows of at most `regulatory_chunk_size` characters, each window after
//!   the first prefixed with the tail of its predecessor;
//! - Form 483 text is split on a delimiter line, one observation per chunk,
//!   never overlapping and never truncated;
//! - expert Q&A pairs become one chunk each.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use chrono::{DateTime, NaiveDate, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::{extract_refs, CfrTree};
use crate::corpus::{Chunk, ChunkId, DocId, DocKind, Observation, SourceDocument};
use crate::text::byte_to_char;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("invalid chunk config: {0}")]
    InvalidConfig(String),
    #[error("observation {index} has {chars} characters, limit is {limit}; re-segment the document")]
    ObservationTooLarge { index: usize, chars: usize, limit: usize },
    #[error("Q&A pair {index} has an empty question or answer")]
    EmptyPairMember { index: usize },
    #[error("expected a {expected} document, got {actual}")]
    WrongKind { expected: DocKind, actual: DocKind },
    #[error("entity name is empty after normalization")]
    EmptyEntity,
    #[error("decision references unknown proposal {0:?}")]
    UnknownProposal(String),
    #[error("conflicting decisions for proposal {0}")]
    ConflictingDecisions(String),
    #[error("cannot merge firm and inspector proposals: {0:?}")]
    MixedKinds(Vec<String>),
    #[error("cannot read stoplist {path}: {message}")]
    Stoplist { path: String, message: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum QaMode {
    #[default]
    QuestionAnswerPaired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub regulatory_chunk_size: usize,
    pub regulatory_overlap_rate: f64,
    pub f483_max_chunk: usize,
    pub f483_delimiter: String,
    pub qa_mode: QaMode,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            regulatory_chunk_size: 1024,
            regulatory_overlap_rate: 0.05,
            f483_max_chunk: 40_000,
            f483_delimiter: "===OBS===".to_string(),
            qa_mode: QaMode::QuestionAnswerPaired,
        }
    }
}

impl ChunkConfig {
    /// `floor(chunk_size * overlap_rate)`.
    pub fn effective_overlap(&self) -> usize {
        (self.regulatory_chunk_size as f64 * self.regulatory_overlap_rate).floor() as usize
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidConfig(m.to_string()));
        if self.regulatory_chunk_size == 0 {
            return bad("regulatory_chunk_size must be positive");
        }
        if !(0.0..1.0).contains(&self.regulatory_overlap_rate) {
            return bad("regulatory_overlap_rate must be in [0, 1)");
        }
        if self.effective_overlap() >= self.regulatory_chunk_size {
            return bad("effective overlap must be smaller than the chunk size");
        }
        if self.f483_max_chunk == 0 {
            return bad("f483_max_chunk must be positive");
        }
        if self.f483_delimiter.trim().is_empty() {
            return bad("f483_delimiter must be non-blank");
        }
        Ok(())
    }
}

/// A newline followed by one or more whitespace-only lines.
static PARAGRAPH_BREAK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\r?\n(?:[ \t\r]*\n)+").unwrap());

/// Paragraph units as character spans. Each unit carries its trailing
/// separator, so the units tile the body exactly.
fn paragraph_units(body: &str) -> Vec<(usize, usize)> {
    let mut units = Vec::new();
    let mut start = 0;
    for m in PARAGRAPH_BREAK.find_iter(body) {
        let end = byte_to_char(body, m.end());
        units.push((start, end));
        start = end;
    }
    let total = body.chars().count();
    if start < total {
        units.push((start, total));
    }
    units
}

/// Chunks regulatory text. `cfg` must satisfy [`ChunkConfig::validate`].
pub fn chunk_regulatory(doc_id: &DocId, body: &str, cfg: &ChunkConfig) -> Vec<Chunk> {
    let size = cfg.regulatory_chunk_size.max(1);
    let overlap = cfg.effective_overlap().min(size - 1);

    let mut pieces: Vec<(usize, usize)> = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for (start, end) in paragraph_units(body) {
        if end - start > size {
            pieces.extend(current.take());
            let mut s = start;
            while s < end {
                let e = (s + size).min(end);
                pieces.push((s, e));
                s = e;
            }
            continue;
        }
        current = match current {
            Some((cs, _)) if end - cs <= size => Some((cs, end)),
            Some(done) => {
                debug_assert_eq!(done.1, start);
                pieces.push(done);
                Some((start, end))
            }
            None => Some((start, end)),
        };
    }
    pieces.extend(current);

    let chars: Vec<char> = body.chars().collect();
    pieces
        .into_iter()
        .enumerate()
        .map(|(seq, (start, end))| {
            let prefix = if seq == 0 { 0 } else { overlap.min(start) };
            let from = start - prefix;
            Chunk {
                chunk_id: ChunkId::for_seq(doc_id, seq),
                doc_id: doc_id.clone(),
                kind: DocKind::Regulatory,
                text: chars[from..end].iter().collect(),
                char_span: (from, end),
                seq,
                overlap_chars: prefix,
            }
        })
        .collect()
}

/// Firm / inspector / date lines that may open a Form 483 body before the
/// first delimiter.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Form483Header {
    pub firm: Option<String>,
    pub inspectors: Vec<String>,
    pub inspected_on: Option<NaiveDate>,
}

static HEADER_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^\s*(firm|inspectors?|investigators?|date)\s*:\s*(.*?)\s*$").unwrap());

fn parse_header(segment: &str) -> Option<Form483Header> {
    let mut header = Form483Header::default();
    let mut any = false;
    for line in segment.lines().filter(|l| !l.trim().is_empty()) {
        let caps = HEADER_LINE.captures(line)?;
        let value = caps[2].to_string();
        match caps[1].to_lowercase().as_str() {
            "firm" => header.firm = Some(value).filter(|v| !v.is_empty()),
            "date" => header.inspected_on = Some(NaiveDate::parse_from_str(&value, "%Y-%m-%d").ok()?),
            _ => header.inspectors.extend(value.split(';').map(str::trim).filter(|v| !v.is_empty()).map(str::to_string)),
        }
        any = true;
    }
    any.then_some(header)
}

/// A delimited observation: trimmed text and its character span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub text: String,
    pub span: (usize, usize),
}

/// Splits a Form 483 body into its optional header and observation
/// segments. Blank segments are skipped.
pub fn segment_483(body: &str, cfg: &ChunkConfig) -> Result<(Form483Header, Vec<Segment>), IngestError> {
    let mut raw = Vec::new();
    let mut byte_start = 0;
    for (pos, _) in body.match_indices(cfg.f483_delimiter.as_str()) {
        raw.push((byte_start, pos));
        byte_start = pos + cfg.f483_delimiter.len();
    }
    raw.push((byte_start, body.len()));

    let mut header = Form483Header::default();
    let mut segments = Vec::new();
    for (i, (b0, b1)) in raw.into_iter().enumerate() {
        let piece = &body[b0..b1];
        let trimmed = piece.trim();
        if trimmed.is_empty() {
            continue;
        }
        if i == 0 && segments.is_empty() {
            if let Some(h) = parse_header(trimmed) {
                header = h;
                continue;
            }
        }
        let lead = piece.len() - piece.trim_start().len();
        let start = byte_to_char(body, b0 + lead);
        let chars = trimmed.chars().count();
        if chars > cfg.f483_max_chunk {
            return Err(IngestError::ObservationTooLarge { index: segments.len(), chars, limit: cfg.f483_max_chunk });
        }
        segments.push(Segment { text: trimmed.to_string(), span: (start, start + chars) });
    }
    Ok((header, segments))
}

/// One chunk per delimited observation, zero overlap.
pub fn chunk_483(doc_id: &DocId, body: &str, cfg: &ChunkConfig) -> Result<Vec<Chunk>, IngestError> {
    let (_, segments) = segment_483(body, cfg)?;
    Ok(segments
        .into_iter()
        .enumerate()
        .map(|(seq, seg)| Chunk {
            chunk_id: ChunkId::for_seq(doc_id, seq),
            doc_id: doc_id.clone(),
            kind: DocKind::Form483,
            text: seg.text,
            char_span: seg.span,
            seq,
            overlap_chars: 0,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

fn qa_unit(pair: &QaPair) -> String {
    format!("Q: {}\nA: {}", pair.question, pair.answer)
}

const QA_SEPARATOR: &str = "\n\n";

/// The document body a batch of Q&A pairs is stored under.
pub fn qa_body(pairs: &[QaPair]) -> String {
    pairs.iter().map(qa_unit).collect::<Vec<_>>().join(QA_SEPARATOR)
}

/// One chunk per pair, spans pointing into [`qa_body`] of the same pairs.
pub fn chunk_qa(doc_id: &DocId, pairs: &[QaPair]) -> Result<Vec<Chunk>, IngestError> {
    if let Some(index) = pairs.iter().position(|p| p.question.trim().is_empty() || p.answer.trim().is_empty()) {
        return Err(IngestError::EmptyPairMember { index });
    }
    let sep = QA_SEPARATOR.chars().count();
    let mut offset = 0;
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(seq, pair)| {
            let text = qa_unit(pair);
            let len = text.chars().count();
            let chunk = Chunk {
                chunk_id: ChunkId::for_seq(doc_id, seq),
                doc_id: doc_id.clone(),
                kind: DocKind::QA,
                text,
                char_span: (offset, offset + len),
                seq,
                overlap_chars: 0,
            };
            offset += len + sep;
            chunk
        })
        .collect())
}

/// Splits a Form 483 document into observation records with their CFR
/// citations. Observation `n` lives in chunk `n` of the same document.
pub fn parse_483(doc: &SourceDocument, cfg: &ChunkConfig, tree: &CfrTree) -> Result<Vec<Observation>, IngestError> {
    if doc.kind != DocKind::Form483 {
        return Err(IngestError::WrongKind { expected: DocKind::Form483, actual: doc.kind });
    }
    let (header, segments) = segment_483(&doc.body, cfg)?;
    Ok(segments
        .into_iter()
        .enumerate()
        .map(|(n, seg)| Observation {
            obs_id: format!("{}-o{n:04}", doc.doc_id),
            doc_id: doc.doc_id.clone(),
            chunk_id: ChunkId::for_seq(&doc.doc_id, n),
            cited_refs: extract_refs(&seg.text, tree),
            text: seg.text,
            firm: header.firm.clone(),
            inspectors: header.inspectors.clone(),
            inspected_on: header.inspected_on,
            firm_group: None,
            inspector_groups: Vec::new(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityKind {
    Firm,
    Inspector,
}

impl EntityKind {
    fn prefix(self) -> &'static str {
        match self {
            EntityKind::Firm => "firm",
            EntityKind::Inspector => "inspector",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

pub const DEFAULT_FIRM_SUFFIXES: &[&str] = &["inc", "llc", "ltd", "corp", "co", "gmbh"];
pub const DEFAULT_HONORIFICS: &[&str] = &["mr", "mrs", "ms", "miss", "dr", "prof", "sir"];

/// Entity-name canonicalizer with configurable stoplists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Normalizer {
    firm_suffixes: BTreeSet<String>,
    honorifics: BTreeSet<String>,
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            firm_suffixes: DEFAULT_FIRM_SUFFIXES.iter().map(|s| s.to_string()).collect(),
            honorifics: DEFAULT_HONORIFICS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Normalizer {
    pub fn with_stoplists<I, J>(firm_suffixes: I, honorifics: J) -> Self
    where
        I: IntoIterator<Item = String>,
        J: IntoIterator<Item = String>,
    {
        Normalizer {
            firm_suffixes: firm_suffixes.into_iter().map(|s| s.trim().to_lowercase()).filter(|s| !s.is_empty()).collect(),
            honorifics: honorifics.into_iter().map(|s| s.trim().to_lowercase()).filter(|s| !s.is_empty()).collect(),
        }
    }

    /// Loads stoplists from files with one token per line (`#` comments allowed).
    pub fn from_files(firm_suffixes: &Path, honorifics: &Path) -> Result<Self, IngestError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p)
                .map(|s| s.lines().filter(|l| !l.trim_start().starts_with('#')).map(str::to_string).collect::<Vec<_>>())
                .map_err(|e| IngestError::Stoplist { path: p.display().to_string(), message: e.to_string() })
        };
        Ok(Self::with_stoplists(read(firm_suffixes)?, read(honorifics)?))
    }

    pub fn normalize(&self, raw: &str, kind: EntityKind) -> Result<String, IngestError> {
        let raw = raw.trim();
        if raw.is_empty() {
            return Err(IngestError::EmptyEntity);
        }
        let reordered;
        let source = match (kind, raw.split_once(',')) {
            (EntityKind::Inspector, Some((last, first))) => {
                reordered = format!("{first} {last}");
                reordered.as_str()
            }
            _ => raw,
        };
        let folded: String = source.to_lowercase().chars().map(|c| if c.is_alphanumeric() { c } else { ' ' }).collect();
        let mut tokens: Vec<&str> = folded.split_whitespace().collect();
        match kind {
            EntityKind::Firm => {
                while tokens.last().is_some_and(|t| self.firm_suffixes.contains(*t)) {
                    tokens.pop();
                }
            }
            EntityKind::Inspector => tokens.retain(|t| !self.honorifics.contains(*t)),
        }
        if tokens.is_empty() {
            return Err(IngestError::EmptyEntity);
        }
        Ok(tokens.join(" "))
    }
}

/// Normalizes with the default stoplists.
pub fn normalize_entity(raw: &str, kind: EntityKind) -> Result<String, IngestError> {
    Normalizer::default().normalize(raw, kind)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupProposal {
    /// `"{kind}:{normalized_key}"`, e.g. `firm:acme pharma`.
    pub id: String,
    pub kind: EntityKind,
    pub normalized_key: String,
    /// Raw surface forms, sorted and deduplicated.
    pub members: Vec<String>,
}

/// Partitions surface forms by normalized key. Forms that normalize to
/// nothing are skipped.
pub fn propose_groups(surface_forms: &[(String, EntityKind)], normalizer: &Normalizer) -> Vec<GroupProposal> {
    let mut by_key: BTreeMap<(String, EntityKind), BTreeSet<String>> = BTreeMap::new();
    for (raw, kind) in surface_forms {
        if let Ok(key) = normalizer.normalize(raw, *kind) {
            by_key.entry((key, *kind)).or_default().insert(raw.clone());
        }
    }
    by_key
        .into_iter()
        .map(|((key, kind), members)| GroupProposal {
            id: format!("{}:{key}", kind.prefix()),
            kind,
            normalized_key: key,
            members: members.into_iter().collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentAction {
    Merge,
    Split,
}

/// A human-confirmed merge or split. `targets` name proposals either by id
/// (`firm:acme pharma`) or by bare normalized key when that is unambiguous.
///
/// A merge joins the targets into one group. A split detaches each target
/// from any earlier merge; a target that was not merged is instead broken
/// up into one group per raw surface form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentDecision {
    pub action: AlignmentAction,
    pub targets: Vec<String>,
    pub confirmed_by: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityGroup {
    pub kind: EntityKind,
    pub canonical_name: String,
    pub members: BTreeSet<String>,
}

/// Final entity partition.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRegistry {
    pub groups: BTreeMap<String, EntityGroup>,
    /// `"{kind}:{raw}"` to group id.
    surface: BTreeMap<String, String>,
    /// `"{kind}:{normalized_key}"` to group id, for unseen variants.
    keys: BTreeMap<String, String>,
}

impl EntityRegistry {
    pub fn count(&self, kind: EntityKind) -> usize {
        self.groups.values().filter(|g| g.kind == kind).count()
    }

    pub fn contains(&self, group_id: &str) -> bool {
        self.groups.contains_key(group_id)
    }

    /// Group of a surface form: exact match first, then by normalized key.
    pub fn group_of(&self, raw: &str, kind: EntityKind) -> Option<&str> {
        if let Some(g) = self.surface.get(&format!("{}:{raw}", kind.prefix())) {
            return Some(g);
        }
        let key = normalize_entity(raw, kind).ok()?;
        self.keys.get(&format!("{}:{key}", kind.prefix())).map(String::as_str)
    }

    /// True when every surface form sits in exactly one group.
    pub fn is_partition(&self) -> bool {
        let mut seen = BTreeSet::new();
        for g in self.groups.values() {
            for m in &g.members {
                if !seen.insert((g.kind, m.clone())) {
                    return false;
                }
            }
        }
        seen.len() == self.surface.len()
    }
}

fn resolve_target<'a>(target: &str, proposals: &'a BTreeMap<String, GroupProposal>) -> Result<&'a GroupProposal, IngestError> {
    if let Some(p) = proposals.get(target) {
        return Ok(p);
    }
    let mut matches = proposals.values().filter(|p| p.normalized_key == target);
    match (matches.next(), matches.next()) {
        (Some(p), None) => Ok(p),
        _ => Err(IngestError::UnknownProposal(target.to_string())),
    }
}

/// Replays decisions in order over the proposals and returns the partition.
pub fn apply_alignment(proposals: &[GroupProposal], decisions: &[AlignmentDecision]) -> Result<EntityRegistry, IngestError> {
    let by_id: BTreeMap<String, GroupProposal> = proposals.iter().map(|p| (p.id.clone(), p.clone())).collect();
    // Each proposal sits in at most one merge set at a time.
    let mut merged: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut exploded: BTreeSet<String> = BTreeSet::new();

    for decision in decisions {
        let targets: BTreeSet<String> = decision
            .targets
            .iter()
            .map(|t| resolve_target(t, &by_id).map(|p| p.id.clone()))
            .collect::<Result<_, _>>()?;
        match decision.action {
            AlignmentAction::Merge => {
                let kinds: BTreeSet<EntityKind> = targets.iter().map(|t| by_id[t].kind).collect();
                if kinds.len() > 1 {
                    return Err(IngestError::MixedKinds(targets.into_iter().collect()));
                }
                if targets.len() < 2 {
                    continue;
                }
                // Extending an existing group is fine; pulling one of its
                // members into a different group is not.
                for t in &targets {
                    if merged.get(t).is_some_and(|set| !set.is_subset(&targets)) {
                        return Err(IngestError::ConflictingDecisions(t.clone()));
                    }
                }
                for t in &targets {
                    exploded.remove(t);
                    merged.insert(t.clone(), targets.clone());
                }
            }
            AlignmentAction::Split => {
                for t in &targets {
                    match merged.remove(t) {
                        Some(set) => {
                            let rest: BTreeSet<String> = set.into_iter().filter(|m| m != t).collect();
                            for m in &rest {
                                if rest.len() >= 2 {
                                    merged.insert(m.clone(), rest.clone());
                                } else {
                                    merged.remove(m);
                                }
                            }
                        }
                        None => {
                            exploded.insert(t.clone());
                        }
                    }
                }
            }
        }
    }

    let mut registry = EntityRegistry::default();
    let add_group = |registry: &mut EntityRegistry, id: String, kind: EntityKind, canonical: String, members: BTreeSet<String>, keys: Vec<String>| {
        for m in &members {
            registry.surface.insert(format!("{}:{m}", kind.prefix()), id.clone());
        }
        for k in keys {
            registry.keys.insert(format!("{}:{k}", kind.prefix()), id.clone());
        }
        registry.groups.insert(id, EntityGroup { kind, canonical_name: canonical, members });
    };

    let mut done = BTreeSet::new();
    for p in proposals {
        if done.contains(&p.id) {
            continue;
        }
        if let Some(set) = merged.get(&p.id) {
            let parts: Vec<&GroupProposal> = set.iter().map(|id| &by_id[id]).collect();
            let canonical = parts.iter().map(|q| q.normalized_key.clone()).min().expect("merge sets are non-empty");
            let members = parts.iter().flat_map(|q| q.members.iter().cloned()).collect();
            let keys = parts.iter().map(|q| q.normalized_key.clone()).collect();
            add_group(&mut registry, format!("{}:{canonical}", p.kind.prefix()), p.kind, canonical, members, keys);
            done.extend(set.iter().cloned());
        } else if exploded.contains(&p.id) {
            for (i, m) in p.members.iter().enumerate() {
                add_group(&mut registry, format!("{}#{i}", p.id), p.kind, m.clone(), BTreeSet::from([m.clone()]), Vec::new());
            }
            done.insert(p.id.clone());
        } else {
            add_group(&mut registry, p.id.clone(), p.kind, p.normalized_key.clone(), p.members.iter().cloned().collect(), vec![p.normalized_key.clone()]);
            done.insert(p.id.clone());
        }
    }
    Ok(registry)
}

/// Parses an alignment decisions JSONL file body.
pub fn parse_decisions(jsonl: &str) -> Result<Vec<AlignmentDecision>, serde_json::Error> {
    jsonl.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Parses a Q&A JSONL body of `{"question","answer"}` objects.
pub fn parse_qa_jsonl(jsonl: &str) -> Result<Vec<QaPair>, serde_json::Error> {
    jsonl.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
