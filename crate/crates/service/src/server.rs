//! HTTP/WebSocket front end: `/session` for the protocol, `/healthz` for probes.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::time::Instant;

use workbench_core::record::RecordMode;

use crate::protocol::{ActionPayload, CreateSession, ErrorBody, Message, MessageType};
use crate::session::{ServiceError, SessionManager};

pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/session", get(session_ws))
        .with_state(manager)
}

async fn healthz(State(m): State<Arc<SessionManager>>) -> impl IntoResponse {
    Json(json!({
        "status": "ok",
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "sessions": m.len(),
    }))
}

async fn session_ws(ws: WebSocketUpgrade, State(m): State<Arc<SessionManager>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, m))
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, manager: Arc<SessionManager>) -> std::io::Result<()> {
    axum::serve(listener, router(manager)).await
}

fn encode(msg: &Message) -> WsMessage {
    WsMessage::Text(serde_json::to_string(msg).expect("message serializes").into())
}

fn failure(session: Option<String>, seq: u64, e: &ServiceError, m: &SessionManager) -> Message {
    let mut body = e.body();
    if body.kind == "episode_done" {
        body.done_reason = session.as_deref().and_then(|id| m.state(id).ok()).map(|s| s.done_reason);
    }
    Message::error(session, seq, body)
}

/// Handles one request and returns the reply; updates the idle deadlines of
/// shared sessions owned by this connection.
fn handle(msg: Message, m: &SessionManager, deadlines: &mut HashMap<String, Instant>, timeout: Duration) -> Message {
    let sid = msg.session_id.clone();
    let result = (|| -> Result<Message, ServiceError> {
        match msg.kind {
            MessageType::Hello => Ok(Message::new(
                MessageType::Hello,
                None,
                msg.seq,
                json!({
                    "server": env!("CARGO_PKG_NAME"),
                    "version": env!("CARGO_PKG_VERSION"),
                    "step_timeout_ms": timeout.as_millis() as u64,
                    "policies": m.policy_ids(),
                }),
            )),
            MessageType::Create => {
                let req: CreateSession = if msg.payload.is_null() {
                    CreateSession::default()
                } else {
                    serde_json::from_value(msg.payload).map_err(|e| ServiceError::Invalid(e.to_string()))?
                };
                let (id, view) = m.create(req)?;
                if view.mode == RecordMode::Shared && !view.done {
                    deadlines.insert(id.clone(), Instant::now() + timeout);
                }
                Ok(Message::new(MessageType::State, Some(id), 0, view))
            }
            MessageType::State => {
                let id = sid.as_deref().ok_or_else(|| ServiceError::Invalid("state needs a session_id".into()))?;
                let view = m.state(id)?;
                Ok(Message::new(MessageType::State, sid.clone(), view.step as u64, view))
            }
            MessageType::Action => {
                let id = sid.as_deref().ok_or_else(|| ServiceError::Invalid("action needs a session_id".into()))?;
                let p: ActionPayload = serde_json::from_value(msg.payload).map_err(|e| ServiceError::Invalid(e.to_string()))?;
                let step = m.submit(id, msg.seq, p.token)?;
                reschedule(deadlines, id, step.state.done, timeout);
                Ok(Message::new(MessageType::StepResult, sid.clone(), step.t as u64, step))
            }
            MessageType::Finalize => {
                let id = sid.as_deref().ok_or_else(|| ServiceError::Invalid("finalize needs a session_id".into()))?;
                let path = m.finalize(id)?;
                deadlines.remove(id);
                Ok(Message::new(MessageType::Finalize, sid.clone(), msg.seq, json!({ "path": path })))
            }
            MessageType::StepResult | MessageType::Error => Err(ServiceError::Invalid(format!("{:?} is server-to-client only", msg.kind))),
        }
    })();
    result.unwrap_or_else(|e| failure(sid, msg.seq, &e, m))
}

fn reschedule(deadlines: &mut HashMap<String, Instant>, id: &str, done: bool, timeout: Duration) {
    if let Some(d) = deadlines.get_mut(id) {
        if done {
            deadlines.remove(id);
        } else {
            *d = Instant::now() + timeout;
        }
    }
}

async fn connection(socket: WebSocket, m: Arc<SessionManager>) {
    let timeout = Duration::from_millis(m.config().service.step_timeout_ms);
    let (mut tx, mut rx) = socket.split();
    let mut deadlines: HashMap<String, Instant> = HashMap::new();
    loop {
        let next = deadlines.iter().min_by_key(|(_, d)| **d).map(|(id, d)| (id.clone(), *d));
        let sleep = async {
            match &next {
                Some((_, d)) => tokio::time::sleep_until(*d).await,
                None => std::future::pending::<()>().await,
            }
        };
        tokio::select! {
            frame = rx.next() => {
                let text = match frame {
                    Some(Ok(WsMessage::Text(t))) => t,
                    Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let reply = match serde_json::from_str::<Message>(&text) {
                    Ok(msg) => handle(msg, &m, &mut deadlines, timeout),
                    Err(e) => Message::error(None, 0, ErrorBody {
                        kind: "invalid".into(),
                        message: format!("malformed message: {e}"),
                        done_reason: None,
                        expected_seq: None,
                    }),
                };
                if tx.send(encode(&reply)).await.is_err() {
                    break;
                }
            }
            _ = sleep => {
                let (id, _) = next.expect("deadline exists");
                let reply = match m.inject_idle(&id) {
                    Ok(step) => {
                        reschedule(&mut deadlines, &id, step.state.done, timeout);
                        Message::new(MessageType::StepResult, Some(id), step.t as u64, step)
                    }
                    Err(e) => {
                        deadlines.remove(&id);
                        failure(Some(id), 0, &e, &m)
                    }
                };
                if tx.send(encode(&reply)).await.is_err() {
                    break;
                }
            }
        }
    }
    tracing::debug!("connection closed with {} live deadlines", deadlines.len());
}
