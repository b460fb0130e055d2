//! Blocking JSON-over-HTTP client shared by the remote embedder, re-ranker
//! and completion backend.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum HttpError {
    #[error("request to {url} timed out")]
    Timeout { url: String },
    #[error("{url} unavailable: {message}")]
    Unavailable { url: String, message: String },
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    url: String,
    agent: ureq::Agent,
}

impl JsonClient {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        JsonClient { url: url.into(), agent }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, HttpError> {
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => HttpError::Timeout { url: self.url.clone() },
            other => HttpError::Unavailable { url: self.url.clone(), message: other.to_string() },
        };
        let mut response = self.agent.post(&self.url).send_json(body).map_err(map_err)?;
        response.body_mut().read_json::<R>().map_err(map_err)
    }
}
