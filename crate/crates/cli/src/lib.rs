//! Operator command line. `dispatch` is the whole program; `main` only wires
//! it to the process.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use qms_core::agent::{run_react, AgentContext, AgentError, AgentStep, AgentTranscript};
use qms_core::compliance::{PartStatus, RiskFilter};
use qms_core::corpus::DocKind;
use qms_core::kb::{parse_documents, KnowledgeBase};
use qms_core::retrieval::Retriever;
use qms_core::settings::{read_config_file, Settings};
use qms_core::StructuredAnswer;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "qms", about = "Compliance evidence agent for cGMP inspection readiness", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Store directory.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// key=value settings file; environment and flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["mock", "remote"])]
    pub backend: Option<String>,
    /// JSONL script of {"expect_marker","reply"} entries for the mock backend.
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    #[arg(long, global = true)]
    pub llm_url: Option<String>,
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    #[arg(long, global = true)]
    pub top_k: Option<usize>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Add documents to the store and refresh the index.
    Ingest {
        kind: IngestKind,
        /// Input file; JSONL for documents and Q&A pairs.
        file: PathBuf,
        /// Title for a Q&A batch.
        #[arg(long, default_value = "Q&A")]
        title: String,
    },
    /// Rebuild the retrieval index from the stored chunks.
    Index,
    /// Ask a question and print the evidence dossier.
    Query {
        text: String,
        /// Print each agent step to stderr as it happens.
        #[arg(long)]
        trace: bool,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Corpus counts and the Form 483 risk profile.
    Stats {
        #[arg(long)]
        firm: Option<String>,
        #[arg(long)]
        part: Option<u32>,
        #[arg(long)]
        from: Option<NaiveDate>,
        #[arg(long)]
        to: Option<NaiveDate>,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Review and apply firm and inspector name alignment.
    Align {
        #[command(subcommand)]
        action: AlignAction,
    },
    /// Print the effective settings.
    Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IngestKind {
    Regulatory,
    Form483,
    Qa,
    CfrManifest,
    AlignmentDecisions,
}

#[derive(Debug, Subcommand)]
pub enum AlignAction {
    /// Candidate groups, one JSON object per line.
    Proposals,
    /// Apply a JSONL file of decisions.
    Apply { file: PathBuf },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<qms_core::settings::SettingsError> for Failure {
    fn from(e: qms_core::settings::SettingsError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<qms_core::kb::KbError> for Failure {
    fn from(e: qms_core::kb::KbError) -> Self {
        if e.is_client_error() {
            Failure::Usage(e.to_string())
        } else {
            Failure::runtime(e)
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e)
    }
}

type Outcome = Result<(), Failure>;

/// Parses `args` (program name first), runs the command and returns the exit
/// code. `env` holds the process environment.
pub fn dispatch<I, S>(args: I, env: &[(String, String)], out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 { out.write_all(rendered.as_bytes()) } else { err.write_all(rendered.as_bytes()) };
            return code;
        }
    };
    match run(cli, env, out, err) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
    }
}

fn settings(global: &GlobalOpts, env: &[(String, String)]) -> Result<Settings, Failure> {
    let file = match &global.config {
        Some(path) => read_config_file(path)?,
        None => Vec::new(),
    };
    let env = qms_core::settings::env_pairs(env.iter().cloned());
    let mut flags: Vec<(String, String)> = Vec::new();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k.to_string(), v));
        }
    };
    flag("data_dir", global.data_dir.as_ref().map(|p| p.display().to_string()));
    flag("backend", global.backend.clone());
    flag("mock_script", global.mock_script.as_ref().map(|p| p.display().to_string()));
    flag("llm_url", global.llm_url.clone());
    flag("max_steps", global.max_steps.map(|v| v.to_string()));
    flag("top_k", global.top_k.map(|v| v.to_string()));
    flag("threshold", global.threshold.map(|v| v.to_string()));
    Ok(Settings::resolve(&file, &env, &flags)?)
}

fn open_kb(s: &Settings) -> Result<KnowledgeBase, Failure> {
    Ok(KnowledgeBase::open(&s.data_dir, s.chunk.clone())?)
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn emit_json(out: &mut dyn Write, value: &impl serde::Serialize) -> Outcome {
    writeln!(out, "{}", serde_json::to_string(value).map_err(Failure::runtime)?)?;
    Ok(())
}

fn run(cli: Cli, env: &[(String, String)], out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let mut s = settings(&cli.global, env)?;
    let json = cli.global.json;
    match cli.command {
        Command::Ingest { kind, file, title } => ingest(&s, kind, &file, &title, json, out),
        Command::Index => {
            let kb = open_kb(&s)?;
            let snapshot = kb.build_snapshot(s.embedder().as_ref())?;
            kb.save_snapshot(&snapshot)?;
            if json {
                emit_json(out, &json!({ "snapshot_id": snapshot.id, "chunks": snapshot.len() }))
            } else {
                writeln!(out, "indexed {} chunks as {}", snapshot.len(), snapshot.id)?;
                Ok(())
            }
        }
        Command::Query { text, trace } => query(&s, &text, trace, json, out, err),
        Command::Serve { bind } => {
            if let Some(bind) = bind {
                s.bind_addr = bind;
            }
            let rt = tokio::runtime::Runtime::new().map_err(Failure::runtime)?;
            rt.block_on(qms_service::serve(&s)).map_err(Failure::runtime)
        }
        Command::Stats { firm, part, from, to, top } => {
            let kb = open_kb(&s)?;
            let stats = kb.stats();
            let risk = kb.risk_report(&RiskFilter { firm_group: firm, from, to, part, top_n: top });
            if json {
                return emit_json(out, &json!({ "corpus": stats, "risk": risk }));
            }
            let c = &stats;
            writeln!(out, "documents  regulatory {}  form483 {}  qa {}", c.documents.regulatory, c.documents.form483, c.documents.qa)?;
            writeln!(out, "chunks     regulatory {}  form483 {}  qa {}", c.chunks.regulatory, c.chunks.form483, c.chunks.qa)?;
            writeln!(out, "observations {}  firm groups {}  inspector groups {}  unverified documents {}", c.observation_count, c.firm_group_count, c.inspector_group_count, c.unverified_documents)?;
            writeln!(out, "observations in scope: {}", risk.total_observations)?;
            for (part, n) in &risk.top_parts {
                let title = match kb.tree().lookup(*part) {
                    PartStatus::Known(p) => p.title.as_str(),
                    PartStatus::Unknown => "",
                };
                writeln!(out, "  part {part:<4} {n:>6}  {title}")?;
            }
            for (part, n) in &risk.unknown_parts {
                writeln!(out, "  part {part:<4} {n:>6}  (not in manifest)")?;
            }
            Ok(())
        }
        Command::Align { action } => {
            let mut kb = open_kb(&s)?;
            match action {
                AlignAction::Proposals => {
                    for p in kb.proposals() {
                        emit_json(out, &p)?;
                    }
                    Ok(())
                }
                AlignAction::Apply { file } => {
                    let groups = kb.apply_decisions_jsonl(&read(&file)?)?;
                    if json {
                        emit_json(out, &json!({ "groups": groups }))
                    } else {
                        writeln!(out, "{groups} groups")?;
                        Ok(())
                    }
                }
            }
        }
        Command::Config => emit_json(out, &s.describe()),
    }
}

fn ingest(s: &Settings, kind: IngestKind, file: &Path, title: &str, json: bool, out: &mut dyn Write) -> Outcome {
    let text = read(file)?;
    let mut kb = open_kb(s)?;
    let report = match kind {
        IngestKind::Regulatory => json!(kb.ingest_documents(DocKind::Regulatory, parse_documents(&text)?)?),
        IngestKind::Form483 => json!(kb.ingest_documents(DocKind::Form483, parse_documents(&text)?)?),
        IngestKind::Qa => json!(kb.ingest_qa_jsonl(title, &text)?),
        IngestKind::CfrManifest => json!({ "parts": kb.set_cfr_manifest(&text)? }),
        IngestKind::AlignmentDecisions => json!({ "groups": kb.apply_decisions_jsonl(&text)? }),
    };
    let snapshot = kb.build_snapshot(s.embedder().as_ref())?;
    kb.save_snapshot(&snapshot)?;
    if json {
        return emit_json(out, &report);
    }
    let count = |k: &str| report.get(k).map(|v| v.as_array().map_or_else(|| v.to_string(), |a| a.len().to_string()));
    let parts: Vec<String> = ["documents", "chunks", "observations", "parts", "groups"].iter().filter_map(|k| count(k).map(|n| format!("{k} {n}"))).collect();
    writeln!(out, "{}; index {}", parts.join(", "), snapshot.id)?;
    Ok(())
}

/// Runs one query against the store in `s`. The service uses the same
/// inputs, so both produce the same answer for the same backend script.
pub fn answer(s: &Settings, text: &str, on_step: &mut dyn FnMut(&AgentStep)) -> Result<(AgentTranscript, StructuredAnswer), AgentError> {
    let kb = KnowledgeBase::open(&s.data_dir, s.chunk.clone()).map_err(|e| AgentError::BackendUnavailable(e.to_string()))?;
    let embedder = s.embedder();
    let reranker = s.reranker();
    let snapshot = kb.snapshot(embedder.as_ref()).map_err(|e| AgentError::BackendUnavailable(e.to_string()))?;
    let factory = s.backend_factory().map_err(|e| AgentError::BackendUnavailable(e.to_string()))?;
    let mut backend = factory.create();
    let ctx = AgentContext { retriever: Retriever { snapshot: &snapshot, embedder: embedder.as_ref(), reranker: reranker.as_ref() }, tree: kb.tree() };
    run_react(text, ctx, backend.as_mut(), &s.agent, &s.retrieval, on_step)
}

fn query(s: &Settings, text: &str, trace: bool, json: bool, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    if text.trim().is_empty() {
        return Err(Failure::Usage("query is empty".into()));
    }
    // Surface configuration problems as usage errors before any work.
    s.backend_factory()?;
    let mut trace_err = None;
    let result = answer(s, text, &mut |step| {
        if trace && trace_err.is_none() {
            let line = format!("[{}] {}", serde_json::to_value(step.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(), step.content.lines().next().unwrap_or(""));
            trace_err = writeln!(err, "{line}").err();
        }
    });
    match result {
        Ok((transcript, answer)) => {
            for w in &transcript.warnings {
                writeln!(err, "warning: {w}")?;
            }
            if json {
                emit_json(out, &answer)
            } else {
                write!(out, "{}", answer.render_text())?;
                Ok(())
            }
        }
        Err(AgentError::EmptyQuery) => Err(Failure::Usage("query is empty".into())),
        Err(AgentError::BudgetExhausted(t)) => {
            if json {
                emit_json(err, &t)?;
            }
            Err(Failure::Runtime(format!("step budget exhausted after {} actions", t.action_count())))
        }
        Err(e) => Err(Failure::runtime(e)),
    }
}
