//! HTTP facade: query sessions with live step streaming over server-sent
//! events, ingestion, statistics and chunk lookup.
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/v1/sessions` | create a session |
//! | GET | `/v1/sessions/{id}` | session status and history |
//! | POST | `/v1/sessions/{id}/query` | `{"query"}`, answered as an SSE stream of [`StreamEvent`]s |
//! | POST | `/v1/ingest/{kind}` | `regulatory`, `form483`, `qa`, `cfr_manifest`, `alignment_decisions` |
//! | GET | `/v1/stats` | corpus statistics and risk summary |
//! | GET | `/v1/healthz` | liveness and current snapshot id |
//! | GET | `/v1/chunks/{id}` | chunk text for citation links |

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::panic::AssertUnwindSafe;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use qms_core::agent::{run_react, AgentContext, AgentError, LlmBackend, StepKind};
use qms_core::compliance::{CfrTree, RiskFilter, RiskReport};
use qms_core::corpus::{CorpusStats, DocId, DocKind};
use qms_core::kb::{parse_documents, KnowledgeBase};
use qms_core::retrieval::{Embedder, IndexSnapshot, Reranker, RetrievalConfig, Retriever};
use qms_core::settings::Settings;
use qms_core::BackendConfig;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio_stream::wrappers::UnboundedReceiverStream;
use tokio_stream::{Stream, StreamExt};

pub mod error;
pub mod session;

pub use error::ServiceError;
pub use session::{EventType, HistoryEntry, Session, SessionStatus, SessionStore, StreamEvent};

/// Makes a fresh completion backend for each query.
pub type BackendSource = Arc<dyn Fn() -> Box<dyn LlmBackend> + Send + Sync>;

#[derive(Debug, Clone, serde::Serialize)]
struct DocMeta {
    title: String,
    source_uri: String,
    verified: bool,
}

/// Everything a query reads, swapped as one unit after each ingest.
#[derive(Debug)]
struct Published {
    snapshot: Arc<IndexSnapshot>,
    tree: Arc<CfrTree>,
    stats: CorpusStats,
    risk: RiskReport,
    documents: HashMap<DocId, DocMeta>,
}

impl Published {
    fn from_kb(kb: &KnowledgeBase, snapshot: IndexSnapshot) -> Self {
        let documents = kb
            .corpus()
            .documents()
            .map(|d| (d.doc_id.clone(), DocMeta { title: d.title.clone(), source_uri: d.source_uri.clone(), verified: d.verified }))
            .collect();
        Published {
            snapshot: Arc::new(snapshot),
            tree: Arc::new(kb.tree().clone()),
            stats: kb.stats(),
            risk: kb.risk_report(&RiskFilter::default()),
            documents,
        }
    }
}

pub struct AppState {
    kb: Mutex<KnowledgeBase>,
    published: RwLock<Arc<Published>>,
    sessions: SessionStore,
    embedder: Arc<dyn Embedder>,
    reranker: Arc<dyn Reranker>,
    backends: BackendSource,
    agent_cfg: BackendConfig,
    retrieval_cfg: RetrievalConfig,
}

impl AppState {
    /// Opens the store under `settings.data_dir` and publishes its index.
    pub fn from_settings(settings: &Settings) -> Result<Arc<Self>, ServiceError> {
        let kb = KnowledgeBase::open(&settings.data_dir, settings.chunk.clone())?;
        let factory = settings.backend_factory()?;
        let backends: BackendSource = Arc::new(move || factory.create());
        Self::new(kb, settings.embedder(), settings.reranker(), backends, settings.agent.clone(), settings.retrieval.clone())
    }

    pub fn new(
        kb: KnowledgeBase,
        embedder: Arc<dyn Embedder>,
        reranker: Arc<dyn Reranker>,
        backends: BackendSource,
        agent_cfg: BackendConfig,
        retrieval_cfg: RetrievalConfig,
    ) -> Result<Arc<Self>, ServiceError> {
        retrieval_cfg.validate()?;
        let snapshot = kb.snapshot(embedder.as_ref())?;
        let published = RwLock::new(Arc::new(Published::from_kb(&kb, snapshot)));
        Ok(Arc::new(AppState { kb: Mutex::new(kb), published, sessions: SessionStore::default(), embedder, reranker, backends, agent_cfg, retrieval_cfg }))
    }

    fn published(&self) -> Arc<Published> {
        self.published.read().expect("published lock").clone()
    }

    pub fn snapshot_id(&self) -> String {
        self.published().snapshot.id.clone()
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    /// Runs one ingest under the writer lock, then rebuilds and swaps the
    /// snapshot. Readers keep the previous snapshot until the swap.
    fn ingest_blocking(&self, kind: &str, title: Option<&str>, body: &str) -> Result<Value, ServiceError> {
        let mut kb = self.kb.lock().map_err(|_| ServiceError::Internal("knowledge base lock poisoned".into()))?;
        let report = match kind {
            "regulatory" => json!(kb.ingest_documents(DocKind::Regulatory, parse_documents(body)?)?),
            "form483" => json!(kb.ingest_documents(DocKind::Form483, parse_documents(body)?)?),
            "qa" => json!(kb.ingest_qa_jsonl(title.unwrap_or("Q&A"), body)?),
            "cfr_manifest" => json!({ "parts": kb.set_cfr_manifest(body)? }),
            "alignment_decisions" => json!({ "groups": kb.apply_decisions_jsonl(body)? }),
            other => return Err(ServiceError::UnknownKind(other.to_string())),
        };
        let snapshot = kb.build_snapshot(self.embedder.as_ref())?;
        kb.save_snapshot(&snapshot)?;
        let published = Arc::new(Published::from_kb(&kb, snapshot));
        let snapshot_id = published.snapshot.id.clone();
        *self.published.write().expect("published lock") = published;
        let mut out = json!({ "kind": kind, "snapshot_id": snapshot_id });
        if let (Value::Object(out), Value::Object(report)) = (&mut out, report) {
            out.extend(report);
        }
        Ok(out)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/query", post(query))
        .route("/v1/ingest/{kind}", post(ingest))
        .route("/v1/stats", get(stats))
        .route("/v1/healthz", get(healthz))
        .route("/v1/chunks/{id}", get(chunk))
        .with_state(state)
}

/// Binds `settings.bind_addr` and serves until the process exits.
pub async fn serve(settings: &Settings) -> Result<(), ServiceError> {
    let state = AppState::from_settings(settings)?;
    let listener = tokio::net::TcpListener::bind(&settings.bind_addr).await.map_err(|e| ServiceError::Internal(format!("bind {}: {e}", settings.bind_addr)))?;
    tracing::info!("listening on {}", settings.bind_addr);
    axum::serve(listener, router(state)).await.map_err(|e| ServiceError::Internal(e.to_string()))
}

async fn create_session(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    let session = state.sessions.create();
    (StatusCode::CREATED, Json(json!({ "session_id": session.session_id })))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Session>, ServiceError> {
    Ok(Json(state.sessions.get(&id)?))
}

#[derive(Deserialize)]
struct QueryRequest {
    query: String,
}

pub fn agent_error_name(e: &AgentError) -> &'static str {
    match e {
        AgentError::EmptyQuery => "EmptyQuery",
        AgentError::BackendUnavailable(_) => "BackendUnavailable",
        AgentError::Timeout => "Timeout",
        AgentError::ContextOverflow { .. } => "ContextOverflow",
        AgentError::QueryAloneExceedsBudget { .. } => "QueryAloneExceedsBudget",
        AgentError::BudgetExhausted(_) => "BudgetExhausted",
        AgentError::UnparseableFinal(_) => "UnparseableFinal",
        AgentError::ScriptMismatch { .. } => "ScriptMismatch",
        AgentError::Retrieval(_) => "RetrievalError",
    }
}

struct Emitter {
    tx: tokio::sync::mpsc::UnboundedSender<StreamEvent>,
    seq: u64,
}

impl Emitter {
    fn emit(&mut self, kind: EventType, payload: Value) {
        // A closed channel means the client went away; the run still
        // finishes so the session history stays complete.
        let _ = self.tx.send(StreamEvent { kind, seq: self.seq, payload });
        self.seq += 1;
    }
}

async fn query(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ServiceError> {
    state.sessions.get(&id)?;
    let request: QueryRequest = serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    if request.query.trim().is_empty() {
        return Err(ServiceError::EmptyQuery);
    }
    state.sessions.begin(&id)?;

    let (tx, rx) = tokio::sync::mpsc::unbounded_channel();
    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        let published = worker.published();
        let mut emitter = Emitter { tx, seq: 0 };
        let run = std::panic::catch_unwind(AssertUnwindSafe(|| {
            let mut backend = (worker.backends)();
            let ctx = AgentContext {
                retriever: Retriever { snapshot: &published.snapshot, embedder: worker.embedder.as_ref(), reranker: worker.reranker.as_ref() },
                tree: &published.tree,
            };
            run_react(&request.query, ctx, backend.as_mut(), &worker.agent_cfg, &worker.retrieval_cfg, &mut |step| {
                if step.kind != StepKind::Final {
                    emitter.emit(step.kind.into(), serde_json::to_value(step).expect("step serializes"));
                }
            })
        }));
        let entry = match run {
            Ok(Ok((transcript, answer))) => {
                emitter.emit(
                    EventType::Final,
                    json!({
                        "answer": answer,
                        "step": transcript.steps.last(),
                        "warnings": transcript.warnings,
                        "token_usage": transcript.token_usage,
                        "snapshot_id": published.snapshot.id,
                    }),
                );
                HistoryEntry { query: request.query, answer: Some(answer), error: None, steps: transcript.steps.len(), completed_at: Utc::now() }
            }
            Ok(Err(e)) => {
                let partial = match &e {
                    AgentError::BudgetExhausted(t) => serde_json::to_value(t).ok(),
                    _ => None,
                };
                emitter.emit(EventType::Error, json!({ "error": agent_error_name(&e), "message": e.to_string(), "transcript": partial }));
                HistoryEntry { query: request.query, answer: None, error: Some(e.to_string()), steps: 0, completed_at: Utc::now() }
            }
            Err(_) => {
                emitter.emit(EventType::Error, json!({ "error": "Internal", "message": "query worker panicked" }));
                HistoryEntry { query: request.query, answer: None, error: Some("query worker panicked".into()), steps: 0, completed_at: Utc::now() }
            }
        };
        worker.sessions.finish(&id, entry);
    });

    let events = UnboundedReceiverStream::new(rx)
        .map(|ev| Ok(Event::default().event(ev.kind.as_str()).data(serde_json::to_string(&ev).expect("event serializes"))));
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn ingest(State(state): State<Arc<AppState>>, Path(kind): Path<String>, Query(params): Query<BTreeMap<String, String>>, body: String) -> Result<Json<Value>, ServiceError> {
    if !matches!(kind.as_str(), "regulatory" | "form483" | "qa" | "cfr_manifest" | "alignment_decisions") {
        return Err(ServiceError::UnknownKind(kind));
    }
    let worker = state.clone();
    let report = tokio::task::spawn_blocking(move || worker.ingest_blocking(&kind, params.get("title").map(String::as_str), &body))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(report))
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<Value> {
    let p = state.published();
    Json(json!({ "corpus": p.stats, "risk": p.risk, "snapshot_id": p.snapshot.id }))
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Value> {
    let p = state.published();
    Json(json!({ "status": "ok", "snapshot_id": p.snapshot.id, "chunks": p.snapshot.len() }))
}

async fn chunk(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ServiceError> {
    let p = state.published();
    let entry = p.snapshot.entry(&qms_core::ChunkId(id.clone())).ok_or(ServiceError::UnknownChunk(id))?;
    Ok(Json(json!({
        "chunk_id": entry.chunk_id,
        "doc_id": entry.doc_id,
        "kind": entry.kind,
        "text": entry.text,
        "document": p.documents.get(&entry.doc_id),
    })))
}

