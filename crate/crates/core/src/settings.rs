//! Runtime settings shared by the CLI and the HTTP service.
//!
//! Every key can come from a flat `key=value` file, from a `GMPILOT_<KEY>`
//! environment variable, or from an explicit override; later layers win.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::agent::{BackendConfig, LlmBackend, MockBackend, RemoteBackend, ScriptEntry};
use crate::ingest::ChunkConfig;
use crate::retrieval::{Embedder, HashingEmbedder, RemoteEmbedder, RemoteReranker, Reranker, RetrievalConfig, TermOverlapReranker, DEFAULT_DIM};

pub const ENV_PREFIX: &str = "GMPILOT_";

/// Every recognized key, in documentation order.
pub const KEYS: &[&str] = &[
    "data_dir",
    "bind_addr",
    "backend",
    "llm_url",
    "embed_url",
    "rerank_url",
    "mock_script",
    "timeout_ms",
    "embed_dim",
    "max_steps",
    "context_window",
    "max_tokens",
    "top_k",
    "threshold",
    "k_candidates",
    "w_kw",
    "w_vec",
    "chunk_size",
    "overlap_rate",
    "f483_max_chunk",
    "f483_delimiter",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SettingsError {
    #[error("unknown setting {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {message}")]
    InvalidValue { key: String, value: String, message: String },
    #[error("{path}:{line}: expected key=value")]
    Syntax { path: String, line: usize },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("setting {0} is required for this backend")]
    Missing(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Mock,
    Remote,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub data_dir: PathBuf,
    pub bind_addr: String,
    /// `None` resolves to remote when `llm_url` is set, mock otherwise.
    pub backend: Option<BackendMode>,
    pub llm_url: Option<String>,
    pub embed_url: Option<String>,
    pub rerank_url: Option<String>,
    pub mock_script: Option<PathBuf>,
    pub timeout: Duration,
    pub embed_dim: usize,
    pub agent: BackendConfig,
    pub retrieval: RetrievalConfig,
    pub chunk: ChunkConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            data_dir: PathBuf::from("gmpilot-data"),
            bind_addr: "127.0.0.1:8080".into(),
            backend: None,
            llm_url: None,
            embed_url: None,
            rerank_url: None,
            mock_script: None,
            timeout: Duration::from_secs(60),
            embed_dim: DEFAULT_DIM,
            agent: BackendConfig::default(),
            retrieval: RetrievalConfig::default(),
            chunk: ChunkConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, SettingsError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| SettingsError::InvalidValue { key: key.into(), value: value.into(), message: e.to_string() })
}

fn optional(value: &str) -> Option<String> {
    let v = value.trim();
    (!v.is_empty()).then(|| v.to_string())
}

/// Reads a flat `key=value` file. Blank lines and `#` comments are skipped.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, SettingsError> {
    let text = std::fs::read_to_string(path).map_err(|e| SettingsError::Io { path: path.display().to_string(), message: e.to_string() })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(SettingsError::Syntax { path: path.display().to_string(), line: i + 1 })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `GMPILOT_*` variables mapped to setting keys. Unrelated variables are
/// ignored.
pub fn env_pairs(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_lowercase(), v)))
        .filter(|(k, _)| KEYS.contains(&k.as_str()))
        .collect();
    out.sort();
    out
}

impl Settings {
    /// Layers `file`, then `env`, then `overrides` over the defaults.
    pub fn resolve(file: &[(String, String)], env: &[(String, String)], overrides: &[(String, String)]) -> Result<Self, SettingsError> {
        let mut s = Settings::default();
        for (k, v) in file.iter().chain(env).chain(overrides) {
            s.set(k, v)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), SettingsError> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value.trim()),
            "bind_addr" => self.bind_addr = value.trim().to_string(),
            "backend" => {
                self.backend = match value.trim().to_lowercase().as_str() {
                    "mock" => Some(BackendMode::Mock),
                    "remote" => Some(BackendMode::Remote),
                    _ => return Err(SettingsError::InvalidValue { key: key.into(), value: value.into(), message: "expected mock or remote".into() }),
                }
            }
            "llm_url" => self.llm_url = optional(value),
            "embed_url" => self.embed_url = optional(value),
            "rerank_url" => self.rerank_url = optional(value),
            "mock_script" => self.mock_script = optional(value).map(PathBuf::from),
            "timeout_ms" => self.timeout = Duration::from_millis(parse(key, value)?),
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "max_steps" => self.agent.max_steps = parse(key, value)?,
            "context_window" => self.agent.context_window = parse(key, value)?,
            "max_tokens" => self.agent.max_tokens = parse(key, value)?,
            "top_k" => self.retrieval.top_k = parse(key, value)?,
            "threshold" => self.retrieval.rerank_threshold = parse(key, value)?,
            "k_candidates" => self.retrieval.k_candidates = parse(key, value)?,
            "w_kw" => self.retrieval.w_kw = parse(key, value)?,
            "w_vec" => self.retrieval.w_vec = parse(key, value)?,
            "chunk_size" => self.chunk.regulatory_chunk_size = parse(key, value)?,
            "overlap_rate" => self.chunk.regulatory_overlap_rate = parse(key, value)?,
            "f483_max_chunk" => self.chunk.f483_max_chunk = parse(key, value)?,
            "f483_delimiter" => self.chunk.f483_delimiter = value.trim().to_string(),
            other => return Err(SettingsError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), SettingsError> {
        let invalid = |key: &str, message: String| SettingsError::InvalidValue { key: key.into(), value: String::new(), message };
        self.retrieval.validate().map_err(|e| invalid("retrieval", e.to_string()))?;
        self.chunk.validate().map_err(|e| invalid("chunking", e.to_string()))?;
        if self.embed_dim == 0 {
            return Err(invalid("embed_dim", "must be positive".into()));
        }
        Ok(())
    }

    pub fn backend_mode(&self) -> BackendMode {
        self.backend.unwrap_or(if self.llm_url.is_some() { BackendMode::Remote } else { BackendMode::Mock })
    }

    pub fn embedder(&self) -> Arc<dyn Embedder> {
        match &self.embed_url {
            Some(url) => Arc::new(RemoteEmbedder::new(url.clone(), self.timeout, self.embed_dim)),
            None => Arc::new(HashingEmbedder::new(self.embed_dim)),
        }
    }

    pub fn reranker(&self) -> Arc<dyn Reranker> {
        match &self.rerank_url {
            Some(url) => Arc::new(RemoteReranker::new(url.clone(), self.timeout)),
            None => Arc::new(TermOverlapReranker),
        }
    }

    /// Loads the mock script or checks the remote URL once, up front.
    pub fn backend_factory(&self) -> Result<BackendFactory, SettingsError> {
        match self.backend_mode() {
            BackendMode::Mock => {
                let script = match &self.mock_script {
                    Some(path) => {
                        let text = std::fs::read_to_string(path).map_err(|e| SettingsError::Io { path: path.display().to_string(), message: e.to_string() })?;
                        MockBackend::from_jsonl(&text)
                            .map_err(|e| SettingsError::InvalidValue { key: "mock_script".into(), value: path.display().to_string(), message: e.to_string() })?
                            .script()
                            .to_vec()
                    }
                    None => Vec::new(),
                };
                Ok(BackendFactory::Mock(script))
            }
            BackendMode::Remote => {
                let url = self.llm_url.clone().ok_or(SettingsError::Missing("llm_url"))?;
                Ok(BackendFactory::Remote { url, timeout: self.timeout })
            }
        }
    }

    /// Effective values, for `--json` diagnostics.
    pub fn describe(&self) -> BTreeMap<&'static str, String> {
        let opt = |o: &Option<String>| o.clone().unwrap_or_default();
        BTreeMap::from([
            ("data_dir", self.data_dir.display().to_string()),
            ("bind_addr", self.bind_addr.clone()),
            ("backend", format!("{:?}", self.backend_mode()).to_lowercase()),
            ("llm_url", opt(&self.llm_url)),
            ("embed_url", opt(&self.embed_url)),
            ("rerank_url", opt(&self.rerank_url)),
            ("mock_script", self.mock_script.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("timeout_ms", self.timeout.as_millis().to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("max_steps", self.agent.max_steps.to_string()),
            ("context_window", self.agent.context_window.to_string()),
            ("max_tokens", self.agent.max_tokens.to_string()),
            ("top_k", self.retrieval.top_k.to_string()),
            ("threshold", self.retrieval.rerank_threshold.to_string()),
            ("k_candidates", self.retrieval.k_candidates.to_string()),
            ("w_kw", self.retrieval.w_kw.to_string()),
            ("w_vec", self.retrieval.w_vec.to_string()),
            ("chunk_size", self.chunk.regulatory_chunk_size.to_string()),
            ("overlap_rate", self.chunk.regulatory_overlap_rate.to_string()),
            ("f483_max_chunk", self.chunk.f483_max_chunk.to_string()),
            ("f483_delimiter", self.chunk.f483_delimiter.clone()),
        ])
    }
}

/// Makes a fresh backend per query, so a mock script always replays from
/// its first entry.
#[derive(Debug, Clone)]
pub enum BackendFactory {
    Mock(Vec<ScriptEntry>),
    Remote { url: String, timeout: Duration },
}

impl BackendFactory {
    pub fn create(&self) -> Box<dyn LlmBackend> {
        match self {
            BackendFactory::Mock(script) => Box::new(MockBackend::new(script.clone())),
            BackendFactory::Remote { url, timeout } => Box::new(RemoteBackend::new(url.clone(), *timeout)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn later_layers_win() {
        let file = kv(&[("top_k", "3"), ("threshold", "0.6"), ("max_steps", "4")]);
        let env = env_pairs(kv(&[("GMPILOT_TOP_K", "4"), ("GMPILOT_THRESHOLD", "0.65"), ("PATH", "/bin")]));
        let flags = kv(&[("top_k", "5")]);
        let s = Settings::resolve(&file, &env, &flags).unwrap();
        assert_eq!(s.retrieval.top_k, 5);
        assert_eq!(s.retrieval.rerank_threshold, 0.65);
        assert_eq!(s.agent.max_steps, 4);
        assert_eq!(s.agent.context_window, 131_072);
    }

    #[test]
    fn backend_mode_defaults_follow_llm_url() {
        let s = Settings::resolve(&[], &[], &[]).unwrap();
        assert_eq!(s.backend_mode(), BackendMode::Mock);
        let s = Settings::resolve(&[], &env_pairs(kv(&[("GMPILOT_LLM_URL", "http://h/complete")])), &[]).unwrap();
        assert_eq!(s.backend_mode(), BackendMode::Remote);
        let s = Settings::resolve(&[], &[], &kv(&[("backend", "remote")])).unwrap();
        assert!(matches!(s.backend_factory(), Err(SettingsError::Missing("llm_url"))));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(matches!(Settings::resolve(&kv(&[("nope", "1")]), &[], &[]), Err(SettingsError::UnknownKey(_))));
        assert!(matches!(Settings::resolve(&[], &[], &kv(&[("top_k", "two")])), Err(SettingsError::InvalidValue { .. })));
        assert!(Settings::resolve(&[], &[], &kv(&[("threshold", "1.5")])).is_err());
        assert!(Settings::resolve(&[], &[], &kv(&[("w_kw", "0.5")])).is_err());
    }

    #[test]
    fn config_file_syntax() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gmpilot.conf");
        std::fs::write(&path, "# comment\n\ntop_k = 3\nllm_url=\n").unwrap();
        assert_eq!(read_config_file(&path).unwrap(), kv(&[("top_k", "3"), ("llm_url", "")]));
        std::fs::write(&path, "top_k 3\n").unwrap();
        assert!(matches!(read_config_file(&path), Err(SettingsError::Syntax { line: 1, .. })));
        assert_eq!(KEYS.len(), Settings::default().describe().len());
    }
}
