//! HTTP + WebSocket front end. Request and response bodies are JSON; the
//! schemas are documented in `docs/protocol.md`.

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{FromRequest, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use super::{ActionRef, RunRequest, RunView, Service};
use crate::curriculum::TrainingStatus;
use crate::env::EnvSpec;
use crate::error::Error;

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

/// `(status code, kind)` used for an error on the wire.
pub fn error_kind(e: &Error) -> (StatusCode, &'static str) {
    match e {
        Error::Validation(_) => (StatusCode::BAD_REQUEST, "validation"),
        Error::Decode(_) | Error::Json(_) => (StatusCode::BAD_REQUEST, "decode"),
        Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
        Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
        Error::Incompatible(_) => (StatusCode::UNPROCESSABLE_ENTITY, "incompatible"),
        Error::ContractViolation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "contract_violation"),
        Error::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
    }
}

fn error_body(e: &Error) -> Value {
    let (_, kind) = error_kind(e);
    json!({ "error": { "kind": kind, "message": e.to_string() } })
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, _) = error_kind(&self.0);
        (status, Json(error_body(&self.0))).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

/// JSON request body whose rejections use the service error shape.
pub struct JsonBody<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for JsonBody<T> {
    type Rejection = ApiError;

    async fn from_request(req: axum::extract::Request, state: &S) -> std::result::Result<Self, ApiError> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(JsonBody(v)),
            Err(rejection) => Err(ApiError(Error::decode(rejection.body_text()))),
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub env: EnvSpec,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct StepBody {
    pub token: String,
    pub action: ActionRef,
}

#[derive(Debug, Deserialize)]
pub struct RewindBody {
    pub token: String,
    pub k: usize,
}

#[derive(Debug, Deserialize)]
pub struct SaveBody {
    pub token: String,
    pub name: String,
}

#[derive(Debug, Deserialize)]
pub struct TokenBody {
    pub token: String,
}

#[derive(Debug, Deserialize)]
pub struct TokenQuery {
    pub token: String,
}

/// Messages a controller sends over the session socket.
#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SessionCommand {
    View,
    Step { action: ActionRef },
    Rewind { k: usize },
    Save { name: String },
    Discard,
}

/// Messages on a run status socket.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StreamEvent {
    Status(TrainingStatus),
    End { run: RunView },
}

pub fn router(service: Service) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(session_create))
        .route("/sessions/{id}", get(session_get))
        .route("/sessions/{id}/step", post(session_step))
        .route("/sessions/{id}/rewind", post(session_rewind))
        .route("/sessions/{id}/save", post(session_save))
        .route("/sessions/{id}/discard", post(session_discard))
        .route("/sessions/{id}/ws", get(session_ws))
        .route("/demos", get(demo_list))
        .route("/demos/{name}", get(demo_get).delete(demo_delete))
        .route("/runs", get(run_list).post(run_start))
        .route("/runs/{id}", get(run_status))
        .route("/runs/{id}/stop", post(run_stop))
        .route("/runs/{id}/resume", post(run_resume))
        .route("/runs/{id}/stream", get(run_stream))
        .with_state(service)
}

/// Serve until the listener fails or the future is dropped.
pub async fn serve(service: Service, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn session_create(State(s): State<Service>, JsonBody(body): JsonBody<CreateSession>) -> ApiResult<super::SessionCreated> {
    Ok(Json(s.session_create(&body.env, body.note)?))
}

async fn session_get(State(s): State<Service>, Path(id): Path<String>) -> ApiResult<super::SessionView> {
    Ok(Json(s.session_view(&id)?))
}

async fn session_step(State(s): State<Service>, Path(id): Path<String>, JsonBody(b): JsonBody<StepBody>) -> ApiResult<super::StepView> {
    Ok(Json(s.session_step(&id, &b.token, &b.action)?))
}

async fn session_rewind(
    State(s): State<Service>,
    Path(id): Path<String>,
    JsonBody(b): JsonBody<RewindBody>,
) -> ApiResult<super::SessionView> {
    Ok(Json(s.session_rewind(&id, &b.token, b.k)?))
}

async fn session_save(State(s): State<Service>, Path(id): Path<String>, JsonBody(b): JsonBody<SaveBody>) -> ApiResult<super::DemoEntry> {
    Ok(Json(s.session_save(&id, &b.token, &b.name)?))
}

async fn session_discard(
    State(s): State<Service>,
    Path(id): Path<String>,
    JsonBody(b): JsonBody<TokenBody>,
) -> ApiResult<super::SessionView> {
    Ok(Json(s.session_discard(&id, &b.token)?))
}

async fn session_ws(
    State(s): State<Service>,
    Path(id): Path<String>,
    Query(q): Query<TokenQuery>,
    ws: WebSocketUpgrade,
) -> Response {
    ws.on_upgrade(move |socket| session_socket(s, id, q.token, socket))
}

fn run_command(s: &Service, id: &str, token: &str, cmd: SessionCommand) -> crate::Result<Value> {
    Ok(match cmd {
        SessionCommand::View => serde_json::to_value(s.session_view(id)?)?,
        SessionCommand::Step { action } => serde_json::to_value(s.session_step(id, token, &action)?)?,
        SessionCommand::Rewind { k } => serde_json::to_value(s.session_rewind(id, token, k)?)?,
        SessionCommand::Save { name } => json!({ "saved": s.session_save(id, token, &name)? }),
        SessionCommand::Discard => serde_json::to_value(s.session_discard(id, token)?)?,
    })
}

async fn session_socket(s: Service, id: String, token: String, mut socket: WebSocket) {
    let first = match s.session_view(&id) {
        Ok(v) => serde_json::to_value(v).unwrap_or(Value::Null),
        Err(e) => error_body(&e),
    };
    if socket.send(Message::Text(first.to_string().into())).await.is_err() {
        return;
    }
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match serde_json::from_str::<SessionCommand>(&text) {
            Ok(cmd) => run_command(&s, &id, &token, cmd).unwrap_or_else(|e| error_body(&e)),
            Err(e) => error_body(&Error::validation(format!("bad session command: {e}"))),
        };
        if socket.send(Message::Text(reply.to_string().into())).await.is_err() {
            break;
        }
    }
}

async fn demo_list(State(s): State<Service>) -> Json<Vec<super::DemoEntry>> {
    Json(s.demo_list())
}

async fn demo_get(State(s): State<Service>, Path(name): Path<String>) -> ApiResult<Value> {
    Ok(Json(s.demo_get(&name)?))
}

async fn demo_delete(State(s): State<Service>, Path(name): Path<String>) -> std::result::Result<StatusCode, ApiError> {
    s.demo_delete(&name)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn run_start(State(s): State<Service>, JsonBody(req): JsonBody<RunRequest>) -> std::result::Result<(StatusCode, Json<RunView>), ApiError> {
    Ok((StatusCode::CREATED, Json(s.run_start(req)?)))
}

async fn run_list(State(s): State<Service>) -> ApiResult<Vec<RunView>> {
    Ok(Json(s.run_list()?))
}

async fn run_status(State(s): State<Service>, Path(id): Path<String>) -> ApiResult<RunView> {
    Ok(Json(s.run_status(&id)?))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> crate::Result<T> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => Ok(Json(r?)),
        Err(e) => Err(ApiError(Error::ContractViolation(format!("background task failed: {e}")))),
    }
}

async fn run_stop(State(s): State<Service>, Path(id): Path<String>) -> ApiResult<RunView> {
    blocking(move || s.run_stop(&id)).await
}

async fn run_resume(State(s): State<Service>, Path(id): Path<String>) -> ApiResult<RunView> {
    Ok(Json(s.run_resume(&id)?))
}

async fn run_stream(State(s): State<Service>, Path(id): Path<String>, ws: WebSocketUpgrade) -> std::result::Result<Response, ApiError> {
    let sub = s.run_subscribe(&id)?;
    Ok(ws.on_upgrade(move |socket| stream_socket(s, id, sub, socket)))
}

async fn send_event(socket: &mut WebSocket, event: &StreamEvent) -> bool {
    let text = serde_json::to_string(event).expect("events serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn stream_socket(s: Service, id: String, sub: super::Subscription, mut socket: WebSocket) {
    let mut last_iteration = None;
    if let Some(status) = sub.last {
        last_iteration = Some(status.iteration);
        if !send_event(&mut socket, &StreamEvent::Status(status)).await {
            return;
        }
    }
    if let Some(mut rx) = sub.events {
        loop {
            match rx.recv().await {
                Ok(status) => {
                    if last_iteration.is_some_and(|i| status.iteration <= i) {
                        continue;
                    }
                    last_iteration = Some(status.iteration);
                    if !send_event(&mut socket, &StreamEvent::Status(status)).await {
                        return;
                    }
                }
                Err(RecvError::Lagged(_)) => continue,
                Err(RecvError::Closed) => break,
            }
        }
    }
    let end = match tokio::task::spawn_blocking(move || s.run_wait(&id)).await {
        Ok(Ok(run)) => StreamEvent::End { run },
        _ => return,
    };
    send_event(&mut socket, &end).await;
    let _ = socket.send(Message::Close(None)).await;
}
