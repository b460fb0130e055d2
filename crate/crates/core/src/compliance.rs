//! CFR part tree, citation parsing, observation-to-part mapping, frequency
//! risk profiles and checklist scaffolds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::LazyLock;

use chrono::{DateTime, NaiveDate, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ChunkId, DocKind, Observation};
use crate::retrieval::Evidence;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ComplianceError {
    #[error("manifest line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("part {0} listed more than once")]
    DuplicatePart(u32),
}

/// A parsed CFR citation such as `21 CFR 211.113(b)` or `Part 312`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CfrRef {
    pub part: u32,
    pub section: Option<u32>,
    /// Paragraph designators, outermost first: `(b)(1)` is `["b", "1"]`.
    pub paragraphs: Vec<String>,
    /// The matched text this reference was parsed from.
    pub source: String,
}

static CITATION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?ix)
        (?P<cfr>\b21\s*C\.?\s?F\.?\s?R\.?\s*(?:part\s*|§+\s*)?(?P<p1>\d{1,4})(?:\.(?P<s1>\d{1,4}))?(?P<q1>(?:\([a-z0-9]{1,4}\))*))
        |(?P<part>\bpart\s+(?P<p2>\d{1,4})\b)
        |(?P<sect>§+\s*(?P<p3>\d{1,4})\.(?P<s3>\d{1,4})(?P<q3>(?:\([a-z0-9]{1,4}\))*))
        |(?P<bare>\b(?P<p4>\d{3})\.(?P<s4>\d{1,4})(?P<q4>(?:\([a-z0-9]{1,4}\))*))
        ",
    )
    .expect("citation pattern compiles")
});

static PARAGRAPH: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\(([A-Za-z0-9]{1,4})\)").unwrap());

/// Which alternative of the citation grammar produced a match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CitationForm {
    Explicit,
    Bare,
}

fn ref_from_captures(caps: &regex::Captures<'_>) -> Option<(CfrRef, CitationForm)> {
    let whole = caps.get(0)?.as_str();
    let (p, s, q, form) = if caps.name("cfr").is_some() {
        (caps.name("p1"), caps.name("s1"), caps.name("q1"), CitationForm::Explicit)
    } else if caps.name("part").is_some() {
        (caps.name("p2"), None, None, CitationForm::Explicit)
    } else if caps.name("sect").is_some() {
        (caps.name("p3"), caps.name("s3"), caps.name("q3"), CitationForm::Explicit)
    } else {
        (caps.name("p4"), caps.name("s4"), caps.name("q4"), CitationForm::Bare)
    };
    let part = p?.as_str().parse().ok()?;
    let section = match s {
        Some(m) => Some(m.as_str().parse().ok()?),
        None => None,
    };
    let paragraphs = q
        .map(|m| PARAGRAPH.captures_iter(m.as_str()).map(|c| c[1].to_lowercase()).collect())
        .unwrap_or_default();
    Some((CfrRef { part, section, paragraphs, source: whole.to_string() }, form))
}

impl CfrRef {
    /// Parses a string consisting of exactly one citation.
    pub fn parse(s: &str) -> Option<CfrRef> {
        let caps = CITATION.captures(s)?;
        let m = caps.get(0)?;
        if m.start() != 0 || m.end() != s.len() {
            return None;
        }
        ref_from_captures(&caps).map(|(r, _)| r)
    }

    pub fn subpart(&self) -> Option<&str> {
        self.paragraphs.first().map(String::as_str)
    }

    /// Grouping key at section granularity: `211.42`, or `Part 312` when
    /// the citation names only a part.
    pub fn section_key(&self) -> String {
        match self.section {
            Some(s) => format!("{}.{}", self.part, s),
            None => format!("Part {}", self.part),
        }
    }
}

impl fmt::Display for CfrRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.section {
            Some(s) => write!(f, "21 CFR {}.{}", self.part, s)?,
            None => write!(f, "21 CFR Part {}", self.part)?,
        }
        for p in &self.paragraphs {
            write!(f, "({p})")?;
        }
        Ok(())
    }
}

/// Extracts citations from free text.
///
/// Prefixed forms (`21 CFR ...`, `Part N`, `§ N.M`) are always accepted. A
/// bare `N.M` is accepted only when part `N` is in `tree`, which keeps
/// decimals such as `100.5 mg` out. Duplicates are dropped, first
/// occurrence wins.
pub fn extract_refs(text: &str, tree: &CfrTree) -> Vec<CfrRef> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for caps in CITATION.captures_iter(text) {
        let Some((r, form)) = ref_from_captures(&caps) else { continue };
        if form == CitationForm::Bare && !tree.contains(r.part) {
            continue;
        }
        if seen.insert((r.part, r.section, r.paragraphs.clone())) {
            out.push(r);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartCategory {
    CoreCgmp,
    Submission,
    Biologics,
    Other,
}

impl PartCategory {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "CoreCgmp" => PartCategory::CoreCgmp,
            "Submission" => PartCategory::Submission,
            "Biologics" => PartCategory::Biologics,
            "Other" => PartCategory::Other,
            _ => return None,
        })
    }
}

impl fmt::Display for PartCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfrPart {
    pub title: String,
    pub category: PartCategory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartStatus<'a> {
    Known(&'a CfrPart),
    Unknown,
}

/// The regulatory tree: CFR part number to title and category.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfrTree {
    parts: BTreeMap<u32, CfrPart>,
}

/// Parts shipped by default: the core cGMP parts, the IND/NDA submission
/// parts and the biologics parts 600 through 680. Everything else is
/// deployment configuration.
pub const DEFAULT_MANIFEST: &str = "\
# part\tcategory\ttitle
210\tCoreCgmp\tCurrent good manufacturing practice in manufacturing, processing, packing, or holding of drugs; general
211\tCoreCgmp\tCurrent good manufacturing practice for finished pharmaceuticals
312\tSubmission\tInvestigational new drug application
314\tSubmission\tApplications for FDA approval to market a new drug
600\tBiologics\tBiological products: general
601\tBiologics\tLicensing
606\tBiologics\tCurrent good manufacturing practice for blood and blood components
607\tBiologics\tEstablishment registration and product listing for manufacturers of human blood and blood products
610\tBiologics\tGeneral biological products standards
630\tBiologics\tRequirements for blood and blood components intended for transfusion or for further manufacturing use
640\tBiologics\tAdditional standards for human blood and blood products
660\tBiologics\tAdditional standards for diagnostic substances for laboratory tests
680\tBiologics\tAdditional standards for miscellaneous products
";

/// Parses a `part<TAB>category<TAB>title` manifest. Blank lines and lines
/// starting with `#` are skipped.
pub fn load_cfr_tree(manifest: &str) -> Result<CfrTree, ComplianceError> {
    let mut parts = BTreeMap::new();
    for (i, raw) in manifest.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, '\t').collect();
        let err = |message: String| ComplianceError::ParseError { line: line_no, message };
        let [part, category, title] = fields[..] else {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        let part: u32 = part.trim().parse().map_err(|_| err(format!("bad part number {part:?}")))?;
        let category = PartCategory::parse(category.trim()).ok_or_else(|| err(format!("unknown category {category:?}")))?;
        if title.trim().is_empty() {
            return Err(err("empty title".into()));
        }
        if parts.insert(part, CfrPart { title: title.to_string(), category }).is_some() {
            return Err(ComplianceError::DuplicatePart(part));
        }
    }
    Ok(CfrTree { parts })
}

impl CfrTree {
    pub fn default_tree() -> Self {
        load_cfr_tree(DEFAULT_MANIFEST).expect("default manifest is valid")
    }

    pub fn contains(&self, part: u32) -> bool {
        self.parts.contains_key(&part)
    }

    pub fn lookup(&self, part: u32) -> PartStatus<'_> {
        self.parts.get(&part).map_or(PartStatus::Unknown, PartStatus::Known)
    }

    pub fn parts(&self) -> impl Iterator<Item = (u32, &CfrPart)> {
        self.parts.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Serializes back to manifest form.
    pub fn to_manifest(&self) -> String {
        self.parts.iter().map(|(p, v)| format!("{p}\t{}\t{}\n", v.category, v.title)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartMapping {
    pub known: Vec<u32>,
    pub unknown: Vec<u32>,
}

/// Distinct cited parts of an observation, split by tree membership.
pub fn map_observation(obs: &Observation, tree: &CfrTree) -> PartMapping {
    let parts: BTreeSet<u32> = obs.cited_refs.iter().map(|r| r.part).collect();
    let (known, unknown) = parts.into_iter().partition(|p| tree.contains(*p));
    PartMapping { known, unknown }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskFilter {
    pub firm_group: Option<String>,
    /// Inclusive bounds; observations without a date are excluded when
    /// either bound is set.
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
    pub part: Option<u32>,
    pub top_n: usize,
}

impl Default for RiskFilter {
    fn default() -> Self {
        RiskFilter { firm_group: None, from: None, to: None, part: None, top_n: 10 }
    }
}

impl RiskFilter {
    pub fn admits(&self, obs: &Observation) -> bool {
        if let Some(g) = &self.firm_group {
            if obs.firm_group.as_ref() != Some(g) {
                return false;
            }
        }
        if self.from.is_some() || self.to.is_some() {
            let Some(date) = obs.inspected_on else { return false };
            if self.from.is_some_and(|f| date < f) || self.to.is_some_and(|t| date > t) {
                return false;
            }
        }
        if let Some(p) = self.part {
            if !obs.cited_refs.iter().any(|r| r.part == p) {
                return false;
            }
        }
        true
    }
}

/// Observation frequencies. A multi-citation observation counts once per
/// distinct part it cites.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskReport {
    pub total_observations: u64,
    pub per_part: BTreeMap<u32, u64>,
    pub unknown_parts: BTreeMap<u32, u64>,
    pub per_firm_group: BTreeMap<String, u64>,
    pub top_parts: Vec<(u32, u64)>,
    pub generated_at: DateTime<Utc>,
}

pub fn risk_profile<'a>(observations: impl IntoIterator<Item = &'a Observation>, tree: &CfrTree, filter: &RiskFilter) -> RiskReport {
    let mut total = 0;
    let mut per_part = BTreeMap::new();
    let mut unknown_parts = BTreeMap::new();
    let mut per_firm_group = BTreeMap::new();
    for obs in observations.into_iter().filter(|o| filter.admits(o)) {
        total += 1;
        let mapping = map_observation(obs, tree);
        for p in mapping.known {
            *per_part.entry(p).or_insert(0) += 1;
        }
        for p in mapping.unknown {
            *unknown_parts.entry(p).or_insert(0) += 1;
        }
        if let Some(g) = &obs.firm_group {
            *per_firm_group.entry(g.clone()).or_insert(0) += 1;
        }
    }
    let mut top_parts: Vec<(u32, u64)> = per_part.iter().map(|(p, c)| (*p, *c)).collect();
    top_parts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    top_parts.truncate(filter.top_n);
    RiskReport { total_observations: total, per_part, unknown_parts, per_firm_group, top_parts, generated_at: Utc::now() }
}

/// One pre-cited row handed to the synthesis prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistRow {
    /// `21 CFR 211.42` for regulatory rows, the observation chunk id for
    /// precedent rows.
    pub anchor: String,
    pub risk_summary: String,
    pub action_item: String,
    pub citations: Vec<ChunkId>,
}

/// Deterministic checklist scaffold: one row per distinct CFR section cited
/// by regulatory evidence (chunks citing the same section share a row), then
/// one row per Form 483 precedent chunk. Rows always carry citations.
pub fn build_checklist(topic: &str, evidence: &[Evidence], tree: &CfrTree) -> Vec<ChecklistRow> {
    let mut by_section: BTreeMap<(u32, Option<u32>), (CfrRef, Vec<ChunkId>)> = BTreeMap::new();
    for ev in evidence.iter().filter(|e| e.kind == DocKind::Regulatory) {
        for r in extract_refs(&ev.text, tree) {
            let entry = by_section
                .entry((r.part, r.section))
                .or_insert_with(|| (CfrRef { paragraphs: Vec::new(), source: String::new(), ..r.clone() }, Vec::new()));
            if !entry.1.contains(&ev.chunk_id) {
                entry.1.push(ev.chunk_id.clone());
            }
        }
    }
    let mut rows: Vec<ChecklistRow> = by_section
        .into_values()
        .map(|(r, citations)| {
            let label = r.to_string();
            let title = match tree.lookup(r.part) {
                PartStatus::Known(p) => format!(" ({})", p.title),
                PartStatus::Unknown => String::new(),
            };
            ChecklistRow {
                risk_summary: format!("Gap against {label}{title} for {topic}"),
                action_item: format!("Verify {topic} controls satisfy {label}"),
                anchor: label,
                citations,
            }
        })
        .collect();
    for ev in evidence.iter().filter(|e| e.kind == DocKind::Form483) {
        let summary: String = ev.text.chars().take(160).collect();
        rows.push(ChecklistRow {
            anchor: ev.chunk_id.to_string(),
            risk_summary: format!("Precedent observation: {}", summary.trim()),
            action_item: format!("Confirm the {topic} programme would withstand this observation"),
            citations: vec![ev.chunk_id.clone()],
        });
    }
    rows
}
