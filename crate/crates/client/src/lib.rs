//! Async client for `sketch-service`. Request and reply types are the
//! `sketch-core` ones, so a remote call returns exactly what the in-process
//! call would.

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sketch_core::bench::{RunConfig, RunOutput};
use sketch_core::session::{ErrorBody, Health, RowBatch, SessionInfo, SessionSketch, SessionSpec};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    /// The service answered with an error status.
    #[error("server returned {status}: {message}")]
    Api { status: u16, message: String },
    #[error("invalid server url {0:?}")]
    BadUrl(String),
}

impl ClientError {
    /// True when the server rejected the request itself (HTTP 400).
    pub fn is_bad_request(&self) -> bool {
        matches!(self, ClientError::Api { status: 400, .. })
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Clone, Debug)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str) -> Result<Self> {
        let base = base.trim_end_matches('/');
        if !(base.starts_with("http://") || base.starts_with("https://")) || base.len() <= "http://".len() {
            return Err(ClientError::BadUrl(base.to_string()));
        }
        Ok(Self {
            base: base.to_string(),
            http: reqwest::Client::new(),
        })
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn send<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&B>) -> Result<T> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await.unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(ClientError::Api {
            status: status.as_u16(),
            message,
        })
    }

    pub async fn health(&self) -> Result<Health> {
        self.send::<(), _>(Method::GET, "/health", None).await
    }

    /// Runs a scenario on the server. Input file paths are read there.
    pub async fn run(&self, cfg: &RunConfig) -> Result<RunOutput> {
        self.send(Method::POST, "/runs", Some(cfg)).await
    }

    pub async fn create_session(&self, spec: &SessionSpec) -> Result<SessionInfo> {
        self.send(Method::POST, "/sessions", Some(spec)).await
    }

    pub async fn sessions(&self) -> Result<Vec<SessionInfo>> {
        self.send::<(), _>(Method::GET, "/sessions", None).await
    }

    pub async fn session(&self, id: u64) -> Result<SessionInfo> {
        self.send::<(), _>(Method::GET, &format!("/sessions/{id}"), None).await
    }

    pub async fn push_rows(&self, id: u64, batch: &RowBatch) -> Result<SessionInfo> {
        self.send(Method::POST, &format!("/sessions/{id}/rows"), Some(batch)).await
    }

    /// Current sketch, or the prefix ending at `at` for persistent sessions.
    pub async fn sketch(&self, id: u64, at: Option<u64>) -> Result<SessionSketch> {
        let path = match at {
            Some(t) => format!("/sessions/{id}/sketch?at={t}"),
            None => format!("/sessions/{id}/sketch"),
        };
        self.send::<(), _>(Method::GET, &path, None).await
    }

    pub async fn delete_session(&self, id: u64) -> Result<()> {
        let resp = self
            .http
            .delete(format!("{}/sessions/{id}", self.base))
            .send()
            .await?;
        match resp.status() {
            StatusCode::NO_CONTENT | StatusCode::OK => Ok(()),
            status => Err(ClientError::Api {
                status: status.as_u16(),
                message: resp.text().await.unwrap_or_default(),
            }),
        }
    }
}
