//! Query sessions and the event stream format.

use std::collections::HashMap;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use qms_core::agent::{AgentStep, StepKind};
use qms_core::StructuredAnswer;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Idle,
    Running,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub query: String,
    pub answer: Option<StructuredAnswer>,
    pub error: Option<String>,
    pub steps: usize,
    pub completed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub status: SessionStatus,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventType {
    Thought,
    Action,
    Observation,
    Final,
    Error,
}

impl EventType {
    pub fn as_str(self) -> &'static str {
        match self {
            EventType::Thought => "thought",
            EventType::Action => "action",
            EventType::Observation => "observation",
            EventType::Final => "final",
            EventType::Error => "error",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, EventType::Final | EventType::Error)
    }
}

impl From<StepKind> for EventType {
    fn from(kind: StepKind) -> Self {
        match kind {
            StepKind::Thought => EventType::Thought,
            StepKind::Action => EventType::Action,
            StepKind::Observation => EventType::Observation,
            StepKind::Final => EventType::Final,
        }
    }
}

/// One server-sent event. `seq` starts at 0 and increases by one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    #[serde(rename = "type")]
    pub kind: EventType,
    pub seq: u64,
    pub payload: Value,
}

impl StreamEvent {
    pub fn step(seq: u64, step: &AgentStep) -> Self {
        StreamEvent { kind: step.kind.into(), seq, payload: serde_json::to_value(step).expect("step serializes") }
    }
}

#[derive(Debug, Default)]
pub struct SessionStore {
    sessions: Mutex<HashMap<String, Session>>,
}

impl SessionStore {
    pub fn create(&self) -> Session {
        let session = Session { session_id: uuid::Uuid::new_v4().to_string(), created_at: Utc::now(), status: SessionStatus::Idle, history: Vec::new() };
        self.sessions.lock().expect("session lock").insert(session.session_id.clone(), session.clone());
        session
    }

    pub fn get(&self, id: &str) -> Result<Session, ServiceError> {
        self.sessions.lock().expect("session lock").get(id).cloned().ok_or_else(|| ServiceError::UnknownSession(id.to_string()))
    }

    /// Marks the session Running unless it already is.
    pub fn begin(&self, id: &str) -> Result<(), ServiceError> {
        let mut sessions = self.sessions.lock().expect("session lock");
        let session = sessions.get_mut(id).ok_or_else(|| ServiceError::UnknownSession(id.to_string()))?;
        if session.status == SessionStatus::Running {
            return Err(ServiceError::SessionBusy(id.to_string()));
        }
        session.status = SessionStatus::Running;
        Ok(())
    }

    pub fn finish(&self, id: &str, entry: HistoryEntry) {
        if let Some(session) = self.sessions.lock().expect("session lock").get_mut(id) {
            session.status = if entry.error.is_some() { SessionStatus::Failed } else { SessionStatus::Idle };
            session.history.push(entry);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn busy_guard_and_failure_status() {
        let store = SessionStore::default();
        let s = store.create();
        store.begin(&s.session_id).unwrap();
        assert!(matches!(store.begin(&s.session_id), Err(ServiceError::SessionBusy(_))));
        let entry = HistoryEntry { query: "q".into(), answer: None, error: Some("boom".into()), steps: 0, completed_at: Utc::now() };
        store.finish(&s.session_id, entry);
        let after = store.get(&s.session_id).unwrap();
        assert_eq!(after.status, SessionStatus::Failed);
        assert_eq!(after.history.len(), 1);
        store.begin(&s.session_id).unwrap();
        assert!(matches!(store.get("nope"), Err(ServiceError::UnknownSession(_))));
    }

    #[test]
    fn event_wire_format() {
        let ev = StreamEvent { kind: EventType::Final, seq: 3, payload: serde_json::json!({"a": 1}) };
        let text = serde_json::to_string(&ev).unwrap();
        assert_eq!(text, r#"{"type":"final","seq":3,"payload":{"a":1}}"#);
        assert_eq!(serde_json::from_str::<StreamEvent>(&text).unwrap(), ev);
    }
}
