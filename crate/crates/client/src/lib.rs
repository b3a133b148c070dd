//! Thin async client for the supervisor API.

mod sse;

use futures::{Stream, StreamExt};
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sitefleet_core::coordinator::events::{EventRecord, WorldView};
use sitefleet_core::coordinator::{Command, CommandError, InjectRequest, Reply};
use sitefleet_core::geo::EnuPoint;
use sitefleet_core::sitemap::ObstacleId;
use sitefleet_core::tasking::{OperationDoc, OperationId};
use thiserror::Error;

pub use sse::{SseEvent, SseParser};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    /// The coordinator rejected the command.
    #[error("{status}: {error}")]
    Command { status: u16, error: CommandError },
    #[error("server returned {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    /// 2 for rejected input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::Command { error: CommandError::Validation(_), .. } => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventBatch {
    pub events: Vec<EventRecord>,
    pub next_seq: u64,
}

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self::with_http(reqwest::Client::new(), base)
    }

    pub fn with_http(http: reqwest::Client, base: impl Into<String>) -> Self {
        Self { http, base: base.into().trim_end_matches('/').to_string() }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1{path}", self.base)
    }

    async fn call<T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&impl Serialize>) -> Result<T, ClientError> {
        let mut req = self.http.request(method, self.url(path));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await?;
        let status = resp.status();
        let text = resp.text().await?;
        if !status.is_success() {
            return Err(error_from(status, text));
        }
        serde_json::from_str(&text).map_err(|e| ClientError::Decode(format!("{e}: {text}")))
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        self.call(Method::GET, path, None::<&()>).await
    }

    async fn post<T: DeserializeOwned>(&self, path: &str, body: &impl Serialize) -> Result<T, ClientError> {
        self.call(Method::POST, path, Some(body)).await
    }

    pub async fn health(&self) -> Result<serde_json::Value, ClientError> {
        self.get("/health").await
    }

    pub async fn stats(&self) -> Result<serde_json::Value, ClientError> {
        self.get("/stats").await
    }

    pub async fn snapshot(&self) -> Result<WorldView, ClientError> {
        self.get("/snapshot").await
    }

    /// Any command through the generic endpoint.
    pub async fn command(&self, command: &Command) -> Result<Reply, ClientError> {
        self.post("/commands", command).await
    }

    pub async fn submit_operation(&self, doc: &OperationDoc) -> Result<Reply, ClientError> {
        self.post("/operations", doc).await
    }

    pub async fn cancel_operation(&self, operation: OperationId) -> Result<Reply, ClientError> {
        self.post(&format!("/operations/{}/cancel", operation.0), &()).await
    }

    pub async fn inject_obstacle(&self, req: &InjectRequest) -> Result<Reply, ClientError> {
        self.post("/obstacles", req).await
    }

    pub async fn clear_obstacle(&self, obstacle: ObstacleId) -> Result<Reply, ClientError> {
        self.call(Method::DELETE, &format!("/obstacles/{}", obstacle.0), None::<&()>).await
    }

    pub async fn pause_vehicle(&self, vehicle: &str) -> Result<Reply, ClientError> {
        self.post(&format!("/vehicles/{vehicle}/pause"), &()).await
    }

    pub async fn resume_vehicle(&self, vehicle: &str) -> Result<Reply, ClientError> {
        self.post(&format!("/vehicles/{vehicle}/resume"), &()).await
    }

    pub async fn plan(&self, start: EnuPoint, goal: EnuPoint) -> Result<Reply, ClientError> {
        self.post("/plan", &serde_json::json!({ "start": start, "goal": goal })).await
    }

    /// One long-poll round of retained events from `from_seq`.
    pub async fn events_batch(&self, from_seq: u64, limit: Option<usize>, wait_ms: Option<u64>) -> Result<EventBatch, ClientError> {
        let mut path = format!("/events/batch?from_seq={from_seq}");
        if let Some(l) = limit {
            path.push_str(&format!("&limit={l}"));
        }
        if let Some(w) = wait_ms {
            path.push_str(&format!("&wait_ms={w}"));
        }
        self.get(&path).await
    }

    /// Server-sent event feed from `from_seq`, or from the next new event
    /// when `None`. Ends when the server closes the stream.
    pub async fn events(&self, from_seq: Option<u64>) -> Result<impl Stream<Item = Result<EventRecord, ClientError>>, ClientError> {
        let path = match from_seq {
            Some(s) => format!("/events?from_seq={s}"),
            None => "/events".to_string(),
        };
        let resp = self.http.get(self.url(&path)).header("accept", "text/event-stream").send().await?;
        let status = resp.status();
        if !status.is_success() {
            return Err(error_from(status, resp.text().await?));
        }
        let mut parser = SseParser::default();
        let stream = resp.bytes_stream().flat_map(move |chunk| {
            let items: Vec<Result<EventRecord, ClientError>> = match chunk {
                Err(e) => vec![Err(ClientError::Http(e))],
                Ok(bytes) => parser
                    .feed(&bytes)
                    .into_iter()
                    .filter(|ev| !ev.data.is_empty())
                    .map(|ev| serde_json::from_str(&ev.data).map_err(|e| ClientError::Decode(format!("{e}: {}", ev.data))))
                    .collect(),
            };
            futures::stream::iter(items)
        });
        Ok(stream)
    }
}

fn error_from(status: StatusCode, body: String) -> ClientError {
    match serde_json::from_str::<CommandError>(&body) {
        Ok(error) => ClientError::Command { status: status.as_u16(), error },
        Err(_) => ClientError::Status { status: status.as_u16(), body },
    }
}
