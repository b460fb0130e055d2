//! The plan / act / observe loop.
//!
//! A query goes through one planning call, one retrieval action per planned
//! sub-goal, and one synthesis call. Backends speak a line protocol:
//!
//! ```text
//! THOUGHT: <text>
//! ACTION: retrieve(corpus=<regulations|cases|qa>, query="<text>")
//! FINAL: <json payload>
//! ```
//!
//! A single `ACTION` in the planner reply makes a simple plan; two or more
//! make a complex plan. Every prompt is checked against the context window
//! before it is sent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::{Arc, LazyLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::{build_checklist, CfrTree, ChecklistRow};
use crate::corpus::{ChunkId, DocKind};
use crate::http::{HttpError, JsonClient};
use crate::retrieval::{retrieve, Evidence, RetrievalConfig, RetrievalError, Retriever};

pub const PLAN_MARKER: &str = "### TASK: PLAN";
pub const SYNTHESIS_MARKER: &str = "### TASK: SYNTHESIZE";
pub const CORRECTION_MARKER: &str = "### TASK: CORRECT";

pub const INSUFFICIENT_EVIDENCE: &str =
    "Insufficient evidence: no retrieved source passed the relevance threshold, so no regulatory basis, precedent or checklist item can be cited.";
pub const DEFAULT_DISCLAIMER: &str = "Decision support only. Verify every item against the cited sources before acting.";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend timed out")]
    Timeout,
    #[error("prompt needs {estimated} tokens, context window is {window}")]
    ContextOverflow { estimated: usize, window: usize },
    #[error("query and instructions alone need {estimated} tokens, context window is {window}")]
    QueryAloneExceedsBudget { estimated: usize, window: usize },
    #[error("step budget exhausted after {} steps", .0.steps.len())]
    BudgetExhausted(Box<AgentTranscript>),
    #[error("final answer does not match the schema: {0}")]
    UnparseableFinal(String),
    #[error("mock script call {call} expected marker {marker:?}")]
    ScriptMismatch { call: usize, marker: String },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

impl From<HttpError> for AgentError {
    fn from(e: HttpError) -> Self {
        match e {
            HttpError::Timeout { .. } => AgentError::Timeout,
            other => AgentError::BackendUnavailable(other.to_string()),
        }
    }
}

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToolHint {
    Regulations,
    Cases,
    QA,
    Synthesize,
}

impl ToolHint {
    fn corpus_name(self) -> &'static str {
        match self {
            ToolHint::Regulations => "regulations",
            ToolHint::Cases => "cases",
            ToolHint::QA => "qa",
            ToolHint::Synthesize => "synthesize",
        }
    }

    pub fn doc_kind(self) -> Option<DocKind> {
        match self {
            ToolHint::Regulations => Some(DocKind::Regulatory),
            ToolHint::Cases => Some(DocKind::Form483),
            ToolHint::QA => Some(DocKind::QA),
            ToolHint::Synthesize => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanMode {
    Simple,
    Complex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubGoal {
    pub description: String,
    pub tool_hint: ToolHint,
    /// Retrieval query; empty for the synthesize step.
    pub query: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub mode: PlanMode,
    /// Retrieval sub-goals in order, then one synthesize step.
    pub sub_goals: Vec<SubGoal>,
    pub rationale: String,
    pub warnings: Vec<String>,
}

impl TaskPlan {
    fn fallback(query: &str, warning: String) -> Self {
        TaskPlan {
            mode: PlanMode::Simple,
            sub_goals: vec![
                SubGoal { description: "Look up the governing regulations".into(), tool_hint: ToolHint::Regulations, query: query.trim().to_string() },
                synthesize_goal(),
            ],
            rationale: String::new(),
            warnings: vec![warning],
        }
    }

    pub fn retrieval_goals(&self) -> impl Iterator<Item = &SubGoal> {
        self.sub_goals.iter().filter(|g| g.tool_hint != ToolHint::Synthesize)
    }
}

fn synthesize_goal() -> SubGoal {
    SubGoal { description: "Synthesize a cited answer".into(), tool_hint: ToolHint::Synthesize, query: String::new() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Thought,
    Action,
    Observation,
    Final,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    pub arguments: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStep {
    pub kind: StepKind,
    pub content: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Vec<ChunkId>>,
}

impl AgentStep {
    fn thought(content: impl Into<String>) -> Self {
        AgentStep { kind: StepKind::Thought, content: content.into(), tool_call: None, evidence: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub query: String,
    pub plan: Option<TaskPlan>,
    pub steps: Vec<AgentStep>,
    /// Estimated tokens across all prompts and replies.
    pub token_usage: usize,
    /// Set when the run stopped before producing a Final step.
    pub partial: bool,
    pub warnings: Vec<String>,
}

impl AgentTranscript {
    pub fn action_count(&self) -> usize {
        self.steps.iter().filter(|s| s.kind == StepKind::Action).count()
    }

    /// All chunk ids observed during the run.
    pub fn evidence_ids(&self) -> BTreeSet<ChunkId> {
        self.steps
            .iter()
            .filter(|s| s.kind == StepKind::Observation)
            .filter_map(|s| s.evidence.as_ref())
            .flatten()
            .cloned()
            .collect()
    }

    /// Every Action is immediately followed by one Observation, every
    /// Observation follows an Action, and a complete transcript ends with its
    /// only Final step (a partial one has none).
    pub fn is_well_formed(&self) -> bool {
        let mut expecting_observation = false;
        for step in &self.steps {
            match (expecting_observation, step.kind) {
                (true, StepKind::Observation) => expecting_observation = false,
                (true, _) | (false, StepKind::Observation) => return false,
                (false, StepKind::Action) => expecting_observation = true,
                _ => {}
            }
        }
        if expecting_observation {
            return false;
        }
        let finals = self.steps.iter().filter(|s| s.kind == StepKind::Final).count();
        if self.partial {
            finals == 0
        } else {
            finals == 1 && self.steps.last().is_some_and(|s| s.kind == StepKind::Final)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisItem {
    pub citation: ChunkId,
    pub excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Precedent {
    pub chunk_id: ChunkId,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChecklistItem {
    pub risk_summary: String,
    pub action_item: String,
    pub citations: Vec<ChunkId>,
    /// Some citations the model gave did not resolve and were removed.
    #[serde(default)]
    pub unsupported: bool,
}

/// The three-section dossier.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredAnswer {
    pub regulatory_basis: Vec<BasisItem>,
    pub precedents: Vec<Precedent>,
    pub checklist: Vec<ChecklistItem>,
    pub disclaimer: String,
}

impl StructuredAnswer {
    pub fn insufficient_evidence() -> Self {
        StructuredAnswer { disclaimer: INSUFFICIENT_EVIDENCE.into(), ..Default::default() }
    }

    pub fn citations(&self) -> impl Iterator<Item = &ChunkId> {
        self.regulatory_basis
            .iter()
            .map(|b| &b.citation)
            .chain(self.precedents.iter().map(|p| &p.chunk_id))
            .chain(self.checklist.iter().flat_map(|c| &c.citations))
    }

    /// Plain-text rendering used by the CLI.
    pub fn render_text(&self) -> String {
        let mut out = String::from("Regulatory basis\n");
        for b in &self.regulatory_basis {
            out.push_str(&format!("  [{}] {}\n", b.citation, b.excerpt.replace('\n', " ")));
        }
        out.push_str("\nHistorical precedents\n");
        for p in &self.precedents {
            out.push_str(&format!("  [{}] {}\n", p.chunk_id, p.summary.replace('\n', " ")));
        }
        out.push_str("\nInspection checklist\n");
        for (i, c) in self.checklist.iter().enumerate() {
            let cites: Vec<&str> = c.citations.iter().map(ChunkId::as_str).collect();
            let flag = if c.unsupported { " (partially unsupported)" } else { "" };
            out.push_str(&format!("  {}. {} -> {} [{}]{flag}\n", i + 1, c.risk_summary, c.action_item, cites.join(", ")));
        }
        out.push_str(&format!("\n{}\n", self.disclaimer));
        out
    }
}

/// Token estimate for a prompt.
#[derive(Clone, Default)]
pub enum TokenEstimator {
    /// `ceil(chars / 4)`.
    #[default]
    CharsDiv4,
    Pluggable(Arc<dyn Fn(&str) -> usize + Send + Sync>),
}

impl TokenEstimator {
    pub fn estimate(&self, text: &str) -> usize {
        match self {
            TokenEstimator::CharsDiv4 => text.chars().count().div_ceil(4),
            TokenEstimator::Pluggable(f) => f(text),
        }
    }
}

impl fmt::Debug for TokenEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenEstimator::CharsDiv4 => f.write_str("CharsDiv4"),
            TokenEstimator::Pluggable(_) => f.write_str("Pluggable"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackendConfig {
    pub context_window: usize,
    pub max_steps: usize,
    pub token_estimator: TokenEstimator,
    /// Completion budget requested from the backend.
    pub max_tokens: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig { context_window: 131_072, max_steps: 8, token_estimator: TokenEstimator::CharsDiv4, max_tokens: 4096 }
    }
}

/// A completion backend. One call in flight per backend instance.
pub trait LlmBackend: Send {
    fn complete(&mut self, prompt: &str, max_tokens: usize) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Substring the prompt must contain; empty matches anything.
    #[serde(default)]
    pub expect_marker: String,
    pub reply: String,
}

/// Replays a fixed script: call `n` returns entry `n`.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    script: Vec<ScriptEntry>,
    cursor: usize,
    prompts: Vec<String>,
}

impl MockBackend {
    pub fn new(script: Vec<ScriptEntry>) -> Self {
        MockBackend { script, cursor: 0, prompts: Vec::new() }
    }

    /// Parses a JSONL script of `{"expect_marker","reply"}` objects.
    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let script = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self::new(script))
    }

    pub fn calls(&self) -> usize {
        self.cursor
    }

    pub fn script(&self) -> &[ScriptEntry] {
        &self.script
    }

    /// Prompts received so far.
    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }
}

impl LlmBackend for MockBackend {
    fn complete(&mut self, prompt: &str, _max_tokens: usize) -> Result<String> {
        let call = self.cursor;
        let entry = self.script.get(call).ok_or_else(|| AgentError::BackendUnavailable(format!("mock script exhausted after {call} calls")))?;
        if !entry.expect_marker.is_empty() && !prompt.contains(&entry.expect_marker) {
            return Err(AgentError::ScriptMismatch { call, marker: entry.expect_marker.clone() });
        }
        self.cursor += 1;
        self.prompts.push(prompt.to_string());
        Ok(entry.reply.clone())
    }
}

/// HTTP completion backend: `POST {"prompt","max_tokens"} -> {"text"}`.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    client: JsonClient,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        RemoteBackend { client: JsonClient::new(url, timeout) }
    }
}

impl LlmBackend for RemoteBackend {
    fn complete(&mut self, prompt: &str, max_tokens: usize) -> Result<String> {
        let response: CompletionResponse = self.client.post(&CompletionRequest { prompt, max_tokens })?;
        Ok(response.text)
    }
}

/// Sends a prompt after checking it against the context window.
pub fn llm_complete(prompt: &Prompt, backend: &mut dyn LlmBackend, cfg: &BackendConfig) -> Result<String> {
    let estimated = cfg.token_estimator.estimate(&prompt.text);
    if estimated > cfg.context_window {
        return Err(AgentError::ContextOverflow { estimated, window: cfg.context_window });
    }
    backend.complete(&prompt.text, cfg.max_tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub estimated_tokens: usize,
    /// Evidence chunks present in the prompt, highest priority first.
    pub included: Vec<ChunkId>,
    /// Evidence dropped to fit the window, lowest priority last.
    pub dropped: Vec<ChunkId>,
}

/// Evidence priority: re-rank score, then fused score, then chunk id.
fn by_priority(a: &Evidence, b: &Evidence) -> std::cmp::Ordering {
    b.rerank_score
        .total_cmp(&a.rerank_score)
        .then_with(|| b.fused_score.total_cmp(&a.fused_score))
        .then_with(|| a.chunk_id.cmp(&b.chunk_id))
}

fn render_prompt(system_role: &str, plan_context: &str, evidence: &[&Evidence], query: &str) -> String {
    let mut out = String::with_capacity(system_role.len() + query.len() + evidence.iter().map(|e| e.text.len() + 64).sum::<usize>());
    out.push_str(system_role);
    out.push_str("\n\n## Plan\n");
    out.push_str(plan_context);
    out.push_str("\n\n## Evidence\n");
    if evidence.is_empty() {
        out.push_str("(none)\n");
    }
    for e in evidence {
        out.push_str(&format!("[{}] kind={} score={:.3}\n{}\n---\n", e.chunk_id, e.kind, e.rerank_score, e.text));
    }
    out.push_str("\n## Query\n");
    out.push_str(query);
    out.push('\n');
    out
}

/// Assembles instructions, id-labelled evidence and the query. Evidence that
/// does not fit the context window is dropped lowest-priority first.
pub fn build_prompt(system_role: &str, plan_context: &str, evidence: &[Evidence], query: &str, cfg: &BackendConfig) -> Result<Prompt> {
    let mut ranked: Vec<&Evidence> = evidence.iter().collect();
    ranked.sort_by(|a, b| by_priority(a, b));
    let estimate = |m: usize| cfg.token_estimator.estimate(&render_prompt(system_role, plan_context, &ranked[..m], query));

    let bare = estimate(0);
    if bare > cfg.context_window {
        return Err(AgentError::QueryAloneExceedsBudget { estimated: bare, window: cfg.context_window });
    }
    // Largest prefix of the priority order that fits.
    let (mut lo, mut hi) = (0, ranked.len());
    if estimate(hi) > cfg.context_window {
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if estimate(mid) <= cfg.context_window {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
    } else {
        lo = hi;
    }
    let text = render_prompt(system_role, plan_context, &ranked[..lo], query);
    let estimated_tokens = cfg.token_estimator.estimate(&text);
    Ok(Prompt {
        text,
        estimated_tokens,
        included: ranked[..lo].iter().map(|e| e.chunk_id.clone()).collect(),
        dropped: ranked[lo..].iter().map(|e| e.chunk_id.clone()).collect(),
    })
}

const PLANNER_ROLE: &str = "### TASK: PLAN
You are a cGMP quality-compliance expert planning how to answer a quality professional.
Decide which sources must be retrieved. Reply only with protocol lines:
THOUGHT: <reasoning about the task>
ACTION: retrieve(corpus=<regulations|cases|qa>, query=\"<search text>\")
Use one ACTION for a direct lookup. For a multi-part task, break it into sub-goals and emit one ACTION per sub-goal, in order.";

const SYNTHESIS_ROLE: &str = "### TASK: SYNTHESIZE
You are a cGMP quality-compliance expert. Answer strictly from the evidence below; cite evidence only by the ids in square brackets.
Reply with optional THOUGHT lines followed by exactly one line starting with FINAL: and a JSON object:
{\"regulatory_basis\":[{\"citation\":\"<id>\",\"excerpt\":\"...\"}],\"precedents\":[{\"chunk_id\":\"<id>\",\"summary\":\"...\"}],\"checklist\":[{\"risk_summary\":\"...\",\"action_item\":\"...\",\"citations\":[\"<id>\"]}],\"disclaimer\":\"...\"}
Fill the prose of the checklist scaffold rows. Never add a checklist row without citations.";

static ACTION_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"^ACTION:\s*retrieve\(\s*corpus\s*=\s*(regulations|cases|qa)\s*,\s*query\s*=\s*"((?:[^"\\]|\\.)*)"\s*\)\s*$"#).unwrap());

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Parses a planner reply. `None` when it holds no usable action.
fn parse_plan(reply: &str, query: &str) -> Option<TaskPlan> {
    let mut goals = Vec::new();
    let mut rationale = Vec::new();
    let mut pending_thought: Option<String> = None;
    let mut warnings = Vec::new();
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(t) = line.strip_prefix("THOUGHT:") {
            let t = t.trim().to_string();
            rationale.push(t.clone());
            pending_thought = Some(t);
        } else if let Some(caps) = ACTION_LINE.captures(line) {
            let tool_hint = match &caps[1] {
                "regulations" => ToolHint::Regulations,
                "cases" => ToolHint::Cases,
                _ => ToolHint::QA,
            };
            let mut q = unescape(&caps[2]).trim().to_string();
            if q.is_empty() {
                q = query.trim().to_string();
            }
            let description = pending_thought.take().unwrap_or_else(|| format!("Retrieve {} for \"{q}\"", tool_hint.corpus_name()));
            goals.push(SubGoal { description, tool_hint, query: q });
        } else {
            warnings.push(format!("ignored planner line: {}", truncate(line, 80)));
        }
    }
    if goals.is_empty() {
        return None;
    }
    let mode = if goals.len() == 1 { PlanMode::Simple } else { PlanMode::Complex };
    goals.push(synthesize_goal());
    Some(TaskPlan { mode, sub_goals: goals, rationale: rationale.join(" "), warnings })
}

fn truncate(s: &str, n: usize) -> String {
    let mut out: String = s.chars().take(n).collect();
    if s.chars().count() > n {
        out.push('…');
    }
    out
}

struct Usage<'a> {
    cfg: &'a BackendConfig,
    tokens: usize,
}

impl Usage<'_> {
    fn call(&mut self, prompt: &Prompt, backend: &mut dyn LlmBackend) -> Result<String> {
        let reply = llm_complete(prompt, backend, self.cfg)?;
        self.tokens += prompt.estimated_tokens + self.cfg.token_estimator.estimate(&reply);
        Ok(reply)
    }
}

/// Asks the backend for a plan. Replies without a usable ACTION fall back to
/// a simple plan with one regulations lookup for the query itself.
pub fn classify_task(query: &str, backend: &mut dyn LlmBackend, cfg: &BackendConfig) -> Result<TaskPlan> {
    let mut usage = Usage { cfg, tokens: 0 };
    plan_with_usage(query, backend, &mut usage)
}

fn plan_with_usage(query: &str, backend: &mut dyn LlmBackend, usage: &mut Usage<'_>) -> Result<TaskPlan> {
    if query.trim().is_empty() {
        return Err(AgentError::EmptyQuery);
    }
    let prompt = build_prompt(PLANNER_ROLE, "(to be decided)", &[], query, usage.cfg)?;
    let reply = usage.call(&prompt, backend)?;
    Ok(parse_plan(&reply, query).unwrap_or_else(|| {
        tracing::warn!("planner reply not understood, falling back to a simple plan");
        TaskPlan::fallback(query, format!("planner reply not understood ({}); using a single regulations lookup", truncate(reply.trim(), 60)))
    }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawBasis {
    citation: String,
    excerpt: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawPrecedent {
    chunk_id: String,
    summary: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawChecklist {
    risk_summary: String,
    action_item: String,
    citations: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RawAnswer {
    regulatory_basis: Vec<RawBasis>,
    precedents: Vec<RawPrecedent>,
    checklist: Vec<RawChecklist>,
    disclaimer: String,
}

struct FinalReply {
    thoughts: Vec<String>,
    answer: RawAnswer,
}

fn parse_final(reply: &str) -> std::result::Result<FinalReply, String> {
    let mut thoughts = Vec::new();
    let mut lines = reply.lines();
    for line in lines.by_ref() {
        let trimmed = line.trim();
        if let Some(t) = trimmed.strip_prefix("THOUGHT:") {
            thoughts.push(t.trim().to_string());
        } else if let Some(rest) = trimmed.strip_prefix("FINAL:") {
            let payload: String = std::iter::once(rest).chain(lines).collect::<Vec<_>>().join("\n");
            let answer = serde_json::from_str::<RawAnswer>(payload.trim()).map_err(|e| format!("FINAL payload is not valid JSON: {e}"))?;
            return Ok(FinalReply { thoughts, answer });
        } else if !trimmed.is_empty() {
            return Err(format!("unexpected line before FINAL: {}", truncate(trimmed, 60)));
        }
    }
    Err("reply has no FINAL line".into())
}

/// Keeps only citations that resolve to evidence. Checklist items that lose
/// some citations are flagged; items left with none are dropped.
fn validate_answer(raw: RawAnswer, evidence: &BTreeMap<ChunkId, &Evidence>, warnings: &mut Vec<String>) -> StructuredAnswer {
    let resolve = |id: &str| evidence.get(&ChunkId(id.trim().to_string())).map(|e| e.chunk_id.clone());
    let mut answer = StructuredAnswer::default();
    for b in raw.regulatory_basis {
        match resolve(&b.citation) {
            Some(id) => {
                let excerpt = if b.excerpt.trim().is_empty() { truncate(&evidence[&id].text, 300) } else { b.excerpt };
                answer.regulatory_basis.push(BasisItem { citation: id, excerpt });
            }
            None => warnings.push(format!("dropped regulatory basis citing unknown chunk {:?}", b.citation)),
        }
    }
    for p in raw.precedents {
        match resolve(&p.chunk_id) {
            Some(id) => answer.precedents.push(Precedent { chunk_id: id, summary: p.summary }),
            None => warnings.push(format!("dropped precedent citing unknown chunk {:?}", p.chunk_id)),
        }
    }
    for item in raw.checklist {
        let given = item.citations.len();
        let mut citations: Vec<ChunkId> = Vec::new();
        for id in item.citations.iter().filter_map(|c| resolve(c)) {
            if !citations.contains(&id) {
                citations.push(id);
            }
        }
        let resolved = item.citations.iter().filter(|c| resolve(c).is_some()).count();
        if citations.is_empty() {
            warnings.push(format!("dropped checklist item without resolvable citations: {}", truncate(&item.risk_summary, 60)));
            continue;
        }
        answer.checklist.push(ChecklistItem { risk_summary: item.risk_summary, action_item: item.action_item, citations, unsupported: resolved < given });
    }
    answer.disclaimer = if raw.disclaimer.trim().is_empty() { DEFAULT_DISCLAIMER.to_string() } else { raw.disclaimer };
    answer
}

fn plan_context(topic: &str, scaffold: &[ChecklistRow]) -> String {
    let rows = serde_json::to_string_pretty(scaffold).expect("scaffold serializes");
    format!("Topic: {topic}\nChecklist scaffold (keep the citations, fill the prose):\n{rows}")
}

/// One synthesis call (plus at most one correction call) over the evidence.
/// Empty evidence short-circuits to an insufficient-evidence answer without
/// calling the backend.
pub fn synthesize(query: &str, evidence: &[Evidence], transcript: &mut AgentTranscript, backend: &mut dyn LlmBackend, cfg: &BackendConfig, tree: &CfrTree) -> Result<StructuredAnswer> {
    let mut usage = Usage { cfg, tokens: 0 };
    let result = synthesize_inner(query, evidence, transcript, backend, &mut usage, tree);
    transcript.token_usage += usage.tokens;
    result
}

fn synthesize_inner(
    query: &str,
    evidence: &[Evidence],
    transcript: &mut AgentTranscript,
    backend: &mut dyn LlmBackend,
    usage: &mut Usage<'_>,
    tree: &CfrTree,
) -> Result<StructuredAnswer> {
    if evidence.is_empty() {
        return Ok(StructuredAnswer::insufficient_evidence());
    }
    let cfg = usage.cfg;
    let mut scaffold = build_checklist(query, evidence, tree);
    let mut prompt = build_prompt(SYNTHESIS_ROLE, &plan_context(query, &scaffold), evidence, query, cfg)?;
    if !prompt.dropped.is_empty() {
        let kept: Vec<Evidence> = evidence.iter().filter(|e| prompt.included.contains(&e.chunk_id)).cloned().collect();
        scaffold = build_checklist(query, &kept, tree);
        prompt = build_prompt(SYNTHESIS_ROLE, &plan_context(query, &scaffold), &kept, query, cfg)?;
        transcript.warnings.push(format!("{} evidence chunks dropped to fit the context window", prompt.dropped.len() + evidence.len() - kept.len()));
    }

    let reply = usage.call(&prompt, backend)?;
    let parsed = match parse_final(&reply) {
        Ok(p) => p,
        Err(problem) => {
            transcript.warnings.push(format!("synthesis reply rejected: {problem}"));
            let correction = format!("{CORRECTION_MARKER}\nYour previous reply was rejected: {problem}\n\n{SYNTHESIS_ROLE}");
            let retry = build_prompt(&correction, &plan_context(query, &scaffold), evidence, query, cfg)?;
            let reply = usage.call(&retry, backend)?;
            parse_final(&reply).map_err(AgentError::UnparseableFinal)?
        }
    };
    for t in parsed.thoughts {
        transcript.steps.push(AgentStep::thought(t));
    }
    let by_id: BTreeMap<ChunkId, &Evidence> = evidence.iter().map(|e| (e.chunk_id.clone(), e)).collect();
    Ok(validate_answer(parsed.answer, &by_id, &mut transcript.warnings))
}

/// Retrieval plus the CFR tree, everything a run needs besides the backend.
#[derive(Clone, Copy)]
pub struct AgentContext<'a> {
    pub retriever: Retriever<'a>,
    pub tree: &'a CfrTree,
}

fn observation_text(evidence: &[Evidence]) -> String {
    if evidence.is_empty() {
        return "No evidence passed the relevance threshold.".into();
    }
    evidence
        .iter()
        .map(|e| format!("[{}] {} score={:.3}: {}", e.chunk_id, e.kind, e.rerank_score, truncate(&e.text.replace('\n', " "), 160)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Runs the full loop. `on_step` sees each step as it is appended.
///
/// At most `cfg.max_steps` actions are taken; a plan needing more ends with
/// [`AgentError::BudgetExhausted`] carrying the partial transcript.
pub fn run_react(
    query: &str,
    ctx: AgentContext<'_>,
    backend: &mut dyn LlmBackend,
    cfg: &BackendConfig,
    rcfg: &RetrievalConfig,
    on_step: &mut dyn FnMut(&AgentStep),
) -> Result<(AgentTranscript, StructuredAnswer)> {
    if query.trim().is_empty() {
        return Err(AgentError::EmptyQuery);
    }
    let mut transcript = AgentTranscript { query: query.to_string(), ..Default::default() };
    if cfg.max_steps == 0 {
        transcript.partial = true;
        return Err(AgentError::BudgetExhausted(Box::new(transcript)));
    }
    rcfg.validate()?;

    let mut usage = Usage { cfg, tokens: 0 };
    let plan = plan_with_usage(query, backend, &mut usage)?;
    transcript.token_usage = usage.tokens;
    transcript.warnings.extend(plan.warnings.iter().cloned());

    let goals: Vec<SubGoal> = plan.retrieval_goals().cloned().collect();
    let mode = match plan.mode {
        PlanMode::Simple => "direct lookup",
        PlanMode::Complex => "multi-step task",
    };
    let opening = if plan.rationale.is_empty() { format!("Treating this as a {mode} with {} retrieval step(s).", goals.len()) } else { plan.rationale.clone() };
    transcript.plan = Some(plan);
    push(&mut transcript, AgentStep::thought(opening), on_step);

    let mut evidence: BTreeMap<ChunkId, Evidence> = BTreeMap::new();
    for (i, goal) in goals.iter().enumerate() {
        if transcript.action_count() >= cfg.max_steps {
            transcript.partial = true;
            transcript.warnings.push(format!("stopped after {} actions; {} sub-goals left", cfg.max_steps, goals.len() - i));
            return Err(AgentError::BudgetExhausted(Box::new(transcript)));
        }
        push(&mut transcript, AgentStep::thought(format!("Sub-goal {}/{}: {}", i + 1, goals.len(), goal.description)), on_step);
        let arguments = BTreeMap::from([("corpus".to_string(), goal.tool_hint.corpus_name().to_string()), ("query".to_string(), goal.query.clone())]);
        push(
            &mut transcript,
            AgentStep {
                kind: StepKind::Action,
                content: format!("retrieve(corpus={}, query={:?})", goal.tool_hint.corpus_name(), goal.query),
                tool_call: Some(ToolCall { name: "retrieve".into(), arguments }),
                evidence: None,
            },
            on_step,
        );
        let observation = match retrieve(ctx.retriever, &goal.query, rcfg, goal.tool_hint.doc_kind()) {
            Ok(result) => {
                let found = result.evidence(ctx.retriever.snapshot);
                let ids = found.iter().map(|e| e.chunk_id.clone()).collect();
                let content = observation_text(&found);
                for e in found {
                    match evidence.get(&e.chunk_id) {
                        Some(prev) if prev.rerank_score >= e.rerank_score => {}
                        _ => {
                            evidence.insert(e.chunk_id.clone(), e);
                        }
                    }
                }
                AgentStep { kind: StepKind::Observation, content, tool_call: None, evidence: Some(ids) }
            }
            Err(e) => AgentStep { kind: StepKind::Observation, content: format!("Retrieval failed: {e}"), tool_call: None, evidence: Some(Vec::new()) },
        };
        push(&mut transcript, observation, on_step);
    }

    let mut ordered: Vec<Evidence> = evidence.into_values().collect();
    ordered.sort_by(by_priority);
    let steps_before = transcript.steps.len();
    let answer = synthesize(query, &ordered, &mut transcript, backend, cfg, ctx.tree)?;
    for step in &transcript.steps[steps_before..] {
        on_step(step);
    }
    let cited: Vec<ChunkId> = answer.citations().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let final_step = AgentStep {
        kind: StepKind::Final,
        content: serde_json::to_string(&answer).expect("answer serializes"),
        tool_call: None,
        evidence: Some(cited),
    };
    push(&mut transcript, final_step, on_step);
    Ok((transcript, answer))
}

fn push(transcript: &mut AgentTranscript, step: AgentStep, on_step: &mut dyn FnMut(&AgentStep)) {
    on_step(&step);
    transcript.steps.push(step);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DocId;

    fn entry(marker: &str, reply: &str) -> ScriptEntry {
        ScriptEntry { expect_marker: marker.into(), reply: reply.into() }
    }

    fn ev(id: &str, score: f64, text: &str) -> Evidence {
        Evidence { chunk_id: ChunkId(id.into()), doc_id: DocId("d".into()), kind: DocKind::Regulatory, text: text.into(), rerank_score: score, fused_score: score }
    }

    #[test]
    fn simple_plan_from_single_action() {
        let mut b = MockBackend::new(vec![entry(PLAN_MARKER, "THOUGHT: direct lookup\nACTION: retrieve(corpus=regulations, query=\"21 CFR 211.113\")")]);
        let plan = classify_task("what does 21 CFR 211.113 require?", &mut b, &BackendConfig::default()).unwrap();
        assert_eq!(plan.mode, PlanMode::Simple);
        assert_eq!(plan.retrieval_goals().count(), 1);
        assert_eq!(plan.sub_goals.last().unwrap().tool_hint, ToolHint::Synthesize);
    }

    #[test]
    fn complex_plan_from_several_actions() {
        let reply = "THOUGHT: break into sub-goals\nACTION: retrieve(corpus=regulations, query=\"aseptic\")\nACTION: retrieve(corpus=cases, query=\"aseptic 483\")";
        let mut b = MockBackend::new(vec![entry("", reply)]);
        let plan = classify_task("write a brief preparation and CAPA for the FDA re-inspection", &mut b, &BackendConfig::default()).unwrap();
        assert_eq!(plan.mode, PlanMode::Complex);
        let hints: Vec<ToolHint> = plan.sub_goals.iter().map(|g| g.tool_hint).collect();
        assert_eq!(hints, vec![ToolHint::Regulations, ToolHint::Cases, ToolHint::Synthesize]);
    }

    #[test]
    fn garbage_plan_falls_back() {
        let mut b = MockBackend::new(vec![entry("", "lorem ipsum")]);
        let plan = classify_task("q", &mut b, &BackendConfig::default()).unwrap();
        assert_eq!(plan.mode, PlanMode::Simple);
        assert_eq!(plan.sub_goals[0].tool_hint, ToolHint::Regulations);
        assert_eq!(plan.warnings.len(), 1);
    }

    #[test]
    fn empty_query_rejected() {
        let mut b = MockBackend::default();
        assert!(matches!(classify_task(" ", &mut b, &BackendConfig::default()), Err(AgentError::EmptyQuery)));
    }

    #[test]
    fn mock_replays_in_order_and_checks_markers() {
        let mut b = MockBackend::new(vec![entry("", "one"), entry("", "two"), entry("needle", "three")]);
        assert_eq!(b.complete("x", 1).unwrap(), "one");
        assert_eq!(b.complete("x", 1).unwrap(), "two");
        assert!(matches!(b.complete("hay", 1), Err(AgentError::ScriptMismatch { call: 2, .. })));
        assert_eq!(b.complete("a needle", 1).unwrap(), "three");
        assert!(matches!(b.complete("x", 1), Err(AgentError::BackendUnavailable(_))));
    }

    #[test]
    fn overflow_checked_before_sending() {
        let cfg = BackendConfig { context_window: 2, ..BackendConfig::default() };
        let prompt = Prompt { text: "0123456789".into(), estimated_tokens: 3, included: vec![], dropped: vec![] };
        let mut b = MockBackend::new(vec![entry("", "never")]);
        assert!(matches!(llm_complete(&prompt, &mut b, &cfg), Err(AgentError::ContextOverflow { estimated: 3, window: 2 })));
        assert_eq!(b.calls(), 0);
    }

    #[test]
    fn unreachable_remote_backend() {
        let mut b = RemoteBackend::new("http://127.0.0.1:9/complete", Duration::from_millis(300));
        let prompt = Prompt { text: "hi".into(), estimated_tokens: 1, included: vec![], dropped: vec![] };
        let err = llm_complete(&prompt, &mut b, &BackendConfig::default()).unwrap_err();
        assert!(matches!(err, AgentError::BackendUnavailable(_) | AgentError::Timeout), "{err:?}");
    }

    #[test]
    fn prompt_under_budget_keeps_all_evidence() {
        let evidence = vec![ev("a", 0.9, "alpha text"), ev("b", 0.8, "beta text")];
        let p = build_prompt("role", "plan", &evidence, "query", &BackendConfig::default()).unwrap();
        assert!(p.text.contains("[a]") && p.text.contains("alpha text") && p.text.contains("[b]"));
        assert!(p.dropped.is_empty());
        assert_eq!(BackendConfig::default().context_window, 131_072);
    }

    #[test]
    fn prompt_drops_lowest_score_first() {
        let evidence = vec![ev("hi", 0.9, &"h".repeat(400)), ev("lo", 0.75, &"l".repeat(400)), ev("mid", 0.8, &"m".repeat(400))];
        let base = build_prompt("role", "plan", &[], "query", &BackendConfig::default()).unwrap().estimated_tokens;
        // Room for roughly two evidence blocks.
        let cfg = BackendConfig { context_window: base + 230, ..BackendConfig::default() };
        let p = build_prompt("role", "plan", &evidence, "query", &cfg).unwrap();
        assert_eq!(p.included, vec![ChunkId("hi".into()), ChunkId("mid".into())]);
        assert_eq!(p.dropped, vec![ChunkId("lo".into())]);
        assert!(p.estimated_tokens <= cfg.context_window);
        assert_eq!(p.estimated_tokens, p.text.chars().count().div_ceil(4));

        let tiny = BackendConfig { context_window: 3, ..BackendConfig::default() };
        assert!(matches!(build_prompt("role", "plan", &evidence, "query", &tiny), Err(AgentError::QueryAloneExceedsBudget { .. })));
    }

    #[test]
    fn synthesis_with_empty_evidence_needs_no_call() {
        let mut b = MockBackend::default();
        let mut t = AgentTranscript::default();
        let a = synthesize("q", &[], &mut t, &mut b, &BackendConfig::default(), &CfrTree::default_tree()).unwrap();
        assert_eq!(a, StructuredAnswer::insufficient_evidence());
        assert_eq!(a.citations().count(), 0);
        assert_eq!(b.calls(), 0);
    }

    #[test]
    fn synthesis_happy_path_and_fabricated_citation() {
        let evidence = vec![ev("a", 0.9, "§ 211.42 Design"), ev("b", 0.8, "§ 211.113 Contamination")];
        let payload = r#"FINAL: {"regulatory_basis":[{"citation":"a","excerpt":"x"},{"citation":"zzz","excerpt":"y"}],"precedents":[],"checklist":[{"risk_summary":"r","action_item":"act","citations":["a","fake-1"]},{"risk_summary":"r2","action_item":"act2","citations":["b"]},{"risk_summary":"r3","action_item":"act3","citations":["ghost"]}],"disclaimer":""}"#;
        let mut b = MockBackend::new(vec![entry(SYNTHESIS_MARKER, payload)]);
        let mut t = AgentTranscript::default();
        let a = synthesize("q", &evidence, &mut t, &mut b, &BackendConfig::default(), &CfrTree::default_tree()).unwrap();
        assert_eq!(a.regulatory_basis.len(), 1);
        assert_eq!(a.checklist.len(), 2);
        assert!(a.checklist[0].unsupported);
        assert_eq!(a.checklist[0].citations, vec![ChunkId("a".into())]);
        assert!(!a.checklist[1].unsupported);
        assert_eq!(a.disclaimer, DEFAULT_DISCLAIMER);
        assert_eq!(a.citations().count(), 3);
    }

    #[test]
    fn synthesis_retries_once_then_fails() {
        let evidence = vec![ev("a", 0.9, "text")];
        let good = r#"FINAL: {"checklist":[{"risk_summary":"r","action_item":"a","citations":["a"]}]}"#;
        let mut b = MockBackend::new(vec![entry(SYNTHESIS_MARKER, "not protocol"), entry(CORRECTION_MARKER, good)]);
        let mut t = AgentTranscript::default();
        let a = synthesize("q", &evidence, &mut t, &mut b, &BackendConfig::default(), &CfrTree::default_tree()).unwrap();
        assert_eq!(a.checklist.len(), 1);

        let mut b = MockBackend::new(vec![entry("", "FINAL: {oops"), entry("", "still bad")]);
        let mut t = AgentTranscript::default();
        let err = synthesize("q", &evidence, &mut t, &mut b, &BackendConfig::default(), &CfrTree::default_tree()).unwrap_err();
        assert!(matches!(err, AgentError::UnparseableFinal(_)));
    }

    #[test]
    fn well_formedness_checks() {
        let step = |kind| AgentStep { kind, content: String::new(), tool_call: None, evidence: None };
        let mut t = AgentTranscript { steps: vec![step(StepKind::Thought), step(StepKind::Action), step(StepKind::Observation), step(StepKind::Final)], ..Default::default() };
        assert!(t.is_well_formed());
        t.steps.swap(1, 2);
        assert!(!t.is_well_formed());
        let t = AgentTranscript { steps: vec![step(StepKind::Action), step(StepKind::Final)], ..Default::default() };
        assert!(!t.is_well_formed());
    }
}
