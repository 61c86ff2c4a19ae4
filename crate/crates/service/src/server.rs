use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use crate::protocol::{parse_client, AckPayload, ClientMessage, ErrorPayload, Message, MessageType, SessionId};
use crate::session::SessionHandle;
use crate::{CreateSession, Created, Hub, ServiceError, PROTOCOL_VERSION};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            Self::UnknownSession(_) => StatusCode::NOT_FOUND,
            Self::UnknownScenario(_) | Self::UnknownCheckpoint(_) | Self::Protocol(_) => StatusCode::BAD_REQUEST,
            Self::Closed => StatusCode::GONE,
            Self::Engine(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let body = ErrorPayload {
            code: self.code().into(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ServiceError>;

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/protocol", get(|| async { Json(json!({ "version": PROTOCOL_VERSION })) }))
        .route("/scenarios", get(scenarios))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(session_info).delete(delete_session))
        .route("/sessions/{id}/buffer", get(buffer))
        .route("/sessions/{id}/log", get(replay_log))
        .route("/sessions/{id}/ws", get(socket))
        .with_state(hub)
}

pub async fn serve(hub: Arc<Hub>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(hub)).await
}

async fn scenarios(State(hub): State<Arc<Hub>>) -> Json<Vec<crate::ScenarioEntry>> {
    Json(hub.scenarios().to_vec())
}

async fn list_sessions(State(hub): State<Arc<Hub>>) -> Json<Vec<crate::SessionInfo>> {
    Json(hub.list().await)
}

async fn create_session(State(hub): State<Arc<Hub>>, Json(req): Json<CreateSession>) -> ApiResult<Created> {
    Ok(Json(Created {
        session: hub.create(&req)?,
    }))
}

async fn session_info(State(hub): State<Arc<Hub>>, Path(id): Path<SessionId>) -> ApiResult<crate::SessionInfo> {
    Ok(Json(hub.get(id)?.info().await?))
}

async fn delete_session(State(hub): State<Arc<Hub>>, Path(id): Path<SessionId>) -> Result<StatusCode, ServiceError> {
    hub.remove(id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn buffer(State(hub): State<Arc<Hub>>, Path(id): Path<SessionId>) -> ApiResult<ttc_core::promptbuffer::BufferDump> {
    Ok(Json(hub.get(id)?.buffer().await?))
}

async fn replay_log(State(hub): State<Arc<Hub>>, Path(id): Path<SessionId>) -> ApiResult<ttc_core::engine::EpisodeLog> {
    Ok(Json(hub.get(id)?.log().await?))
}

async fn socket(ws: WebSocketUpgrade, State(hub): State<Arc<Hub>>, Path(id): Path<SessionId>) -> Result<Response, ServiceError> {
    let handle = hub.get(id)?;
    Ok(ws.on_upgrade(move |s| client_loop(s, handle)))
}

/// Applies one client text frame to the session and returns the reply.
pub async fn handle_text(session: &SessionHandle, text: &str) -> Message {
    let id = session.id();
    let (target, msg) = match parse_client(text) {
        Ok(m) => m,
        Err(e) => return Message::error(id, None, "protocol", e.0),
    };
    if target != id {
        let e = ServiceError::UnknownSession(target);
        return Message::error(id, None, e.code(), e.to_string());
    }
    match msg {
        ClientMessage::Click { frame, point } => match session.click(frame, point).await {
            Ok(ev) => Message::new(
                MessageType::Ack,
                id,
                Some(ev.frame),
                AckPayload::Click {
                    prompt_id: ev.prompt_id,
                    fallback: ev.low_quality,
                },
            ),
            Err(e) => Message::error(id, Some(frame), e.code(), e.to_string()),
        },
        ClientMessage::Control(command) => match session.control(command).await {
            Ok(playback) => Message::new(
                MessageType::Ack,
                id,
                playback.next_frame.checked_sub(1),
                AckPayload::Control { command, playback },
            ),
            Err(e) => Message::error(id, None, e.code(), e.to_string()),
        },
        ClientMessage::BufferRequest => match session.buffer().await {
            Ok(dump) => Message::new(MessageType::Buffer, id, None, dump),
            Err(e) => Message::error(id, None, e.code(), e.to_string()),
        },
    }
}

async fn send(socket: &mut WebSocket, m: &Message) -> bool {
    socket.send(WsMessage::Text(m.to_text().into())).await.is_ok()
}

async fn client_loop(mut socket: WebSocket, session: SessionHandle) {
    let _guard = session.connect();
    let mut events = session.subscribe();
    if let Ok(Some(frame)) = session.latest_frame().await {
        if !send(&mut socket, &frame).await {
            return;
        }
    }
    loop {
        tokio::select! {
            incoming = socket.recv() => match incoming {
                Some(Ok(WsMessage::Text(t))) => {
                    let reply = handle_text(&session, t.as_str()).await;
                    if !send(&mut socket, &reply).await {
                        return;
                    }
                }
                Some(Ok(WsMessage::Binary(_))) => {
                    let m = Message::error(session.id(), None, "protocol", "binary frames are not part of the protocol");
                    if !send(&mut socket, &m).await {
                        return;
                    }
                }
                Some(Ok(WsMessage::Close(_))) | Some(Err(_)) | None => return,
                Some(Ok(_)) => {}
            },
            ev = events.recv() => match ev {
                Ok(m) => {
                    if !send(&mut socket, &m).await {
                        return;
                    }
                }
                Err(RecvError::Lagged(_)) => {}
                Err(RecvError::Closed) => return,
            }
        }
    }
}
