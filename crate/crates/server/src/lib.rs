//! HTTP+JSON API over [`lwise_core::expserve::Service`], plus a blocking
//! client that lets simulated participants take sessions over the wire.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lwise_core::curriculum::Variant;
use lwise_core::expserve::{Feedback, NextTrial, ResponseRequest, Service, SessionResults};
use lwise_core::Error;
use serde::{Deserialize, Serialize};

mod client;

pub use client::HttpDriver;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub participant_id: String,
    /// Forces the condition instead of the weighted draw (simulations).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let kind = self.0.kind();
        let status = match kind {
            "not_found" => StatusCode::NOT_FOUND,
            "conflict" | "terminal_state" | "ordering" | "still_active" => StatusCode::CONFLICT,
            "validation" => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            error: kind.to_string(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking service work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> lwise_core::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::InvalidArgument(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn create(
    State(svc): State<Arc<Service>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let session_id = blocking(move || svc.create_session_as(&req.participant_id, req.variant)).await?;
    Ok((StatusCode::CREATED, Json(SessionCreated { session_id })))
}

async fn trial(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<NextTrial>> {
    Ok(Json(blocking(move || svc.next_trial(&id)).await?))
}

async fn respond(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    Json(req): Json<ResponseRequest>,
) -> ApiResult<Json<Feedback>> {
    Ok(Json(blocking(move || svc.submit_response(&id, &req)).await?))
}

async fn withdraw(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    blocking(move || svc.withdraw(&id)).await?;
    Ok(Json(serde_json::json!({ "status": "withdrawn" })))
}

async fn results(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<SessionResults>> {
    Ok(Json(blocking(move || svc.session_results(&id)).await?))
}

async fn health(State(svc): State<Arc<Service>>) -> Json<serde_json::Value> {
    let sessions = svc.state().sessions.len();
    Json(serde_json::json!({
        "status": "ok",
        "experiment_id": svc.config().experiment_id,
        "sessions": sessions,
    }))
}

async fn asset(State(svc): State<Arc<Service>>, Path(file): Path<String>) -> ApiResult<Response> {
    let token = file
        .strip_suffix(".png")
        .ok_or_else(|| Error::UnknownImage(file.clone()))?
        .to_string();
    let png = blocking(move || svc.assets().png(&token).ok_or(Error::UnknownImage(token))?).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "private, max-age=3600"),
        ],
        Body::from(png),
    )
        .into_response())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}/trial", get(trial))
        .route("/v1/sessions/{id}/response", post(respond))
        .route("/v1/sessions/{id}/withdraw", post(withdraw))
        .route("/v1/sessions/{id}/results", get(results))
        .route("/v1/assets/{file}", get(asset))
        .with_state(service)
}

/// Serves until the process exits.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(service)).await
}

/// A server on an ephemeral localhost port, running on its own thread.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(service: Arc<Service>) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                let _ = axum::serve(listener, router(service))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(BackgroundServer {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
