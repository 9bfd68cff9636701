//! Axum handlers. Each room sits behind its own mutex, so mutations of one
//! room are serialized while different rooms proceed in parallel. Pollers
//! only read events that are already in the log.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration as WallDuration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chronochat_core::catalog::{load_event_pool, EventPool};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::watch;
use tower_http::cors::CorsLayer;

use crate::room::{EventKind, EventView, Phase, Room, RoomError, RoomEvent, RoomSettings, REFERENCE_POOL};
use crate::store::Store;
use crate::ServiceConfig;

/// Longest wait a client may ask for.
pub const MAX_POLL_WAIT: WallDuration = WallDuration::from_secs(60);

struct RoomCell {
    room: Room,
    events: Vec<RoomEvent>,
}

pub struct RoomHandle {
    cell: Mutex<RoomCell>,
    latest: watch::Sender<u64>,
}

impl RoomHandle {
    fn new(room: Room, events: Vec<RoomEvent>) -> Arc<RoomHandle> {
        let (latest, _) = watch::channel(room.seq);
        Arc::new(RoomHandle {
            cell: Mutex::new(RoomCell { room, events }),
            latest,
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, RoomCell> {
        self.cell.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub struct AppState {
    store: Store,
    rooms: RwLock<HashMap<String, Arc<RoomHandle>>>,
    poll_wait: WallDuration,
}

fn durable(kind: EventKind) -> bool {
    matches!(kind, EventKind::Joined | EventKind::SessionEnded | EventKind::Completed)
}

impl AppState {
    /// Opens the data directory and rebuilds every room from disk.
    pub fn open(config: &ServiceConfig) -> Result<Arc<AppState>, RoomError> {
        let store = Store::open(&config.data_dir)?;
        let mut rooms = HashMap::new();
        for id in store.room_ids()? {
            let (room, events) = store.load_room(&id)?;
            let handle = RoomHandle::new(room, events);
            {
                let mut cell = handle.lock();
                finish_if_completed(&store, &mut cell)?;
                handle.latest.send_replace(cell.room.seq);
            }
            rooms.insert(id, handle);
        }
        tracing::info!(rooms = rooms.len(), dir = %config.data_dir.display(), "state restored");
        Ok(Arc::new(AppState {
            store,
            rooms: RwLock::new(rooms),
            poll_wait: config.poll_wait,
        }))
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn room(&self, id: &str) -> Result<Arc<RoomHandle>, RoomError> {
        self.rooms
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| RoomError::NoSuchRoom(id.to_string()))
    }

    pub fn create_room(&self, settings: RoomSettings) -> Result<Room, RoomError> {
        settings.validate()?;
        let pool = if settings.pool == REFERENCE_POOL {
            EventPool::reference()
        } else {
            load_event_pool(Path::new(&settings.pool)).map_err(|e| RoomError::BadConfig(e.to_string()))?
        };
        let id = uuid::Uuid::new_v4().simple().to_string();
        let room = Room::create(id.clone(), settings, &pool)?;
        self.store.create_room(&room)?;
        self.rooms
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, RoomHandle::new(room.clone(), Vec::new()));
        Ok(room)
    }

    /// Validates a command against the room, logs the resulting event and
    /// applies it, all under the room lock.
    pub fn commit<T>(
        &self,
        room_id: &str,
        command: impl FnOnce(&Room) -> Result<RoomEvent, RoomError>,
        reply: impl FnOnce(&Room, &RoomEvent) -> T,
    ) -> Result<T, RoomError> {
        let handle = self.room(room_id)?;
        let mut cell = handle.lock();
        let event = command(&cell.room)?;
        self.store.append_event(room_id, &event, durable(event.kind))?;
        cell.room.apply(&event)?;
        cell.events.push(event.clone());
        if event.kind == EventKind::SessionEnded {
            self.store.snapshot(&cell.room)?;
        }
        let out = reply(&cell.room, &event);
        finish_if_completed(&self.store, &mut cell)?;
        handle.latest.send_replace(cell.room.seq);
        Ok(out)
    }

    pub fn view(&self, room_id: &str, token: Option<&str>) -> Result<Value, RoomError> {
        let handle = self.room(room_id)?;
        let cell = handle.lock();
        let viewer = token.map(|t| cell.room.speaker_for(t)).transpose()?;
        Ok(serde_json::to_value(cell.room.view(viewer)).expect("view serializes"))
    }

    /// Events after `since` as seen by the token holder, waiting up to
    /// `wait` for the first one.
    pub async fn poll(&self, room_id: &str, token: &str, since: u64, wait: WallDuration) -> Result<(Vec<EventView>, u64), RoomError> {
        let handle = self.room(room_id)?;
        let mut rx = handle.latest.subscribe();
        let viewer = handle.lock().room.speaker_for(token)?;
        if *rx.borrow_and_update() <= since {
            let _ = tokio::time::timeout(wait, rx.wait_for(|&seq| seq > since)).await;
        }
        let cell = handle.lock();
        let events = cell
            .events
            .iter()
            .filter(|e| e.seq > since)
            .map(|e| e.view_for(Some(viewer)))
            .collect();
        Ok((events, cell.room.seq))
    }
}

/// Writes the conversation of a finished room and closes its log with a
/// `completed` event. Safe to call repeatedly.
fn finish_if_completed(store: &Store, cell: &mut RoomCell) -> Result<(), RoomError> {
    if cell.room.phase != Phase::Completed || cell.events.last().is_some_and(|e| e.kind == EventKind::Completed) {
        return Ok(());
    }
    store.record_conversation(&cell.room.conversation())?;
    let event = cell.room.completed_event();
    store.append_event(&cell.room.room_id, &event, true)?;
    cell.room.apply(&event)?;
    cell.events.push(event);
    store.snapshot(&cell.room)?;
    tracing::info!(room = %cell.room.room_id, "conversation recorded");
    Ok(())
}

pub struct ApiError(RoomError);

impl From<RoomError> for ApiError {
    fn from(e: RoomError) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(RoomError::BadConfig(e.body_text()))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let e = self.0;
        let status = match &e {
            RoomError::BadConfig(_) | RoomError::EmptyText => StatusCode::BAD_REQUEST,
            RoomError::InvalidToken => StatusCode::UNAUTHORIZED,
            RoomError::NoSuchRoom(_) => StatusCode::NOT_FOUND,
            RoomError::RoomFull
            | RoomError::WrongPhase(_)
            | RoomError::TooFewUtterances { .. }
            | RoomError::AlreadyAcknowledged => StatusCode::CONFLICT,
            RoomError::Storage(_) | RoomError::CorruptLog(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": e.kind(), "message": e.to_string() });
        match &e {
            RoomError::TooFewUtterances { have, need } => {
                body["utterances"] = json!(have);
                body["remaining_utterances"] = json!(need - have);
            }
            RoomError::WrongPhase(phase) => body["phase"] = json!(phase),
            _ => {}
        }
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(error = %e, "request failed");
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

#[derive(Debug, Default, Deserialize)]
struct TokenBody {
    #[serde(default)]
    token: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct JoinBody {
    #[serde(default)]
    display_name: String,
}

#[derive(Debug, Deserialize)]
struct UtteranceBody {
    #[serde(default)]
    token: Option<String>,
    text: String,
}

#[derive(Debug, Deserialize)]
struct StateQuery {
    #[serde(default)]
    token: Option<String>,
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: u64,
    #[serde(default)]
    token: Option<String>,
    /// Seconds; defaults to the server setting.
    #[serde(default)]
    wait: Option<f64>,
}

/// Token from the body or query, else from `Authorization: Bearer`.
fn token(explicit: Option<String>, headers: &HeaderMap) -> Result<String, RoomError> {
    explicit
        .or_else(|| {
            headers
                .get("authorization")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("Bearer "))
                .map(str::to_string)
        })
        .ok_or(RoomError::InvalidToken)
}

async fn create_room(State(state): State<Arc<AppState>>, body: Result<Json<RoomSettings>, JsonRejection>) -> ApiResult {
    let Json(settings) = body?;
    let room = state.create_room(settings)?;
    Ok(Json(json!({ "room_id": room.room_id, "state": room.view(None) })))
}

async fn join_room(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Option<Json<JoinBody>>,
) -> ApiResult {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let token = uuid::Uuid::new_v4().simple().to_string();
    let reply = state.commit(
        &id,
        |room| room.join(&body.display_name, &token),
        |room, event| {
            let speaker = event.speaker.expect("join has a speaker");
            json!({
                "token": token,
                "speaker": speaker,
                "seq": event.seq,
                "initial_events": room.initial_cards(speaker),
                "state": room.view(Some(speaker)),
            })
        },
    )?;
    Ok(Json(reply))
}

async fn post_utterance(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Result<Json<UtteranceBody>, JsonRejection>,
) -> ApiResult {
    let Json(body) = body?;
    let token = token(body.token, &headers)?;
    let reply = state.commit(
        &id,
        |room| room.utterance(&token, &body.text),
        |room, event| {
            json!({
                "seq": event.seq,
                "utterances_in_session": room.current.len(),
                "remaining_utterances": room.settings.min_utterances.saturating_sub(room.current.len()),
                "end_session_available": room.end_session_available(),
                "end_session_hint": room.end_session_hint(),
            })
        },
    )?;
    Ok(Json(reply))
}

async fn end_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Option<Json<TokenBody>>,
) -> ApiResult {
    let token = token(body.and_then(|Json(b)| b.token), &headers)?;
    let reply = state.commit(
        &id,
        |room| room.end_session(&token),
        |room, event| {
            let speaker = event.speaker.expect("end has a speaker");
            json!({
                "seq": event.seq,
                "session_index": event.payload["session_index"],
                "gap": event.payload["gap"],
                "final": event.payload["final"],
                "phase": room.phase,
                "updates": event.private.get(&speaker),
                "conversation_id": (room.phase == Phase::Completed).then(|| room.room_id.clone()),
            })
        },
    )?;
    Ok(Json(reply))
}

async fn start_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Option<Json<TokenBody>>,
) -> ApiResult {
    let token = token(body.and_then(|Json(b)| b.token), &headers)?;
    let reply = state.commit(
        &id,
        |room| room.start_session(&token),
        |room, event| {
            json!({
                "seq": event.seq,
                "phase": room.phase,
                "session_index": room.session_index,
                "elapsed": room.clock.elapsed,
            })
        },
    )?;
    Ok(Json(reply))
}

async fn room_state(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    Query(q): Query<StateQuery>,
) -> ApiResult {
    let token = token(q.token, &headers).ok();
    Ok(Json(state.view(&id, token.as_deref())?))
}

async fn poll_events(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    Query(q): Query<EventsQuery>,
) -> ApiResult {
    let token = token(q.token, &headers)?;
    let wait = match q.wait {
        Some(secs) if secs.is_finite() && secs >= 0.0 => WallDuration::from_secs_f64(secs).min(MAX_POLL_WAIT),
        Some(_) => return Err(RoomError::BadConfig("wait must be a non-negative number of seconds".into()).into()),
        None => state.poll_wait,
    };
    let (events, seq) = state.poll(&id, &token, q.since, wait).await?;
    Ok(Json(json!({ "events": events, "seq": seq })))
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/rooms", post(create_room))
        .route("/rooms/{id}/join", post(join_room))
        .route("/rooms/{id}/utterances", post(post_utterance))
        .route("/rooms/{id}/end-session", post(end_session))
        .route("/rooms/{id}/start-session", post(start_session))
        .route("/rooms/{id}/state", get(room_state))
        .route("/rooms/{id}/events", get(poll_events))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

