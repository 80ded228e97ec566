//! HTTP API over one annotation session.
//!
//! Every endpoint lives under `/api`. Mutations are serialised through a
//! single write lock on the session; long computations (training, layouts)
//! run as jobs on snapshots and report through the `/api/events` stream.

mod api;
mod jobs;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use tokio::sync::{broadcast, Mutex, RwLock};

use segscape::session::Session;

pub use api::router;
pub use jobs::{Job, JobKind, JobState};

/// One message on the event stream.
#[derive(Debug, Clone, Serialize)]
pub struct ServerEvent {
    pub kind: String,
    pub data: serde_json::Value,
}

pub(crate) struct Inner {
    pub session: RwLock<Session>,
    pub session_dir: Mutex<Option<PathBuf>>,
    pub events: broadcast::Sender<ServerEvent>,
    pub jobs: std::sync::Mutex<jobs::JobTable>,
    /// Held by the running train or layout job.
    pub compute: Mutex<()>,
    /// Responses of mutating requests by request id.
    pub replies: Mutex<HashMap<String, (StatusCode, serde_json::Value)>>,
}

/// Shared state behind the router.
#[derive(Clone)]
pub struct AppState {
    pub(crate) inner: Arc<Inner>,
}

impl AppState {
    /// `session_dir` is the default target of save/load requests and of the shutdown save.
    pub fn new(session: Session, session_dir: Option<PathBuf>) -> Self {
        let (events, _) = broadcast::channel(1024);
        AppState {
            inner: Arc::new(Inner {
                session: RwLock::new(session),
                session_dir: Mutex::new(session_dir),
                events,
                jobs: std::sync::Mutex::new(jobs::JobTable::default()),
                compute: Mutex::new(()),
                replies: Mutex::new(HashMap::new()),
            }),
        }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<ServerEvent> {
        self.inner.events.subscribe()
    }

    pub(crate) fn emit(&self, kind: &str, data: serde_json::Value) {
        // No subscribers is fine.
        let _ = self.inner.events.send(ServerEvent {
            kind: kind.to_owned(),
            data,
        });
    }

    /// Saves the session to its directory, if one is configured.
    pub async fn persist(&self) -> segscape::Result<Option<PathBuf>> {
        let dir = self.inner.session_dir.lock().await.clone();
        if let Some(d) = &dir {
            self.inner.session.read().await.save(d)?;
        }
        Ok(dir)
    }
}

/// API error: a status plus a message rendered as `{"error": ...}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<segscape::Error> for ApiError {
    fn from(e: segscape::Error) -> Self {
        use segscape::Error as E;
        let status = match &e {
            E::InvalidArgument(_) | E::DegenerateInput(_) | E::DimensionMismatch { .. } | E::InsufficientLabels(_) => {
                StatusCode::BAD_REQUEST
            }
            E::UnknownImage(_) | E::UnknownSegment(_) | E::UnknownLabel(_) => StatusCode::NOT_FOUND,
            E::MissingFeature(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

/// Serves until Ctrl-C, then saves the session to its directory.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    match state.persist().await {
        Ok(Some(dir)) => log::info!("session saved to {}", dir.display()),
        Ok(None) => {}
        Err(e) => log::error!("saving session failed: {e}"),
    }
    Ok(())
}
