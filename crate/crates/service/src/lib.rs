//! Session-oriented HTTP API over the dialog controller.
//!
//! Routes live under `/v1`. Every session is an append-only event log on
//! disk; a round is acknowledged only after its event has been synced, and
//! the logs are replayed on startup. Single process, no authentication.

mod store;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use talkedit_core::backend::{Attribute, ImageTensor, LatentCode};
use talkedit_core::dialog::{
    dialog_round, DialogModels, DialogState, EditSummary, FeedbackMessage, FsmState,
};

pub use store::{Event, HistoryEntry, SessionRecord, SessionStore};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("image {0} not found")]
    ImageNotFound(String),
    #[error("session has ended")]
    Ended,
    #[error("another message for this session is still being processed")]
    Busy,
    #[error("{0}")]
    Invalid(String),
    #[error("models are not loaded")]
    Unavailable,
    #[error("internal error: {0}")]
    Internal(String),
    #[error("corrupt session log: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Core(#[from] talkedit_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) | ServiceError::ImageNotFound(_) => "not_found",
            ServiceError::Ended | ServiceError::Core(talkedit_core::Error::SessionEnded) => {
                "session_ended"
            }
            ServiceError::Busy => "busy",
            ServiceError::Invalid(_)
            | ServiceError::Core(talkedit_core::Error::InvalidArgument(_)) => "invalid_request",
            ServiceError::Unavailable => "service_unavailable",
            _ => "internal",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self.code() {
            "not_found" => StatusCode::NOT_FOUND,
            "session_ended" | "busy" => StatusCode::CONFLICT,
            "invalid_request" => StatusCode::BAD_REQUEST,
            "service_unavailable" => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Body of every error response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if self.status() == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{self}");
        }
        let body = ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateRequest {
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionResponse {
    pub session_id: String,
    pub seed: u64,
    /// Path of the rendered image, relative to the server root.
    pub image: String,
    pub image_hash: String,
    pub degrees: Vec<u8>,
    pub attributes: Vec<String>,
    pub fsm: FsmState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageResponse {
    pub session_id: String,
    pub round: u64,
    pub feedback: FeedbackMessage,
    pub image: String,
    pub image_hash: String,
    pub degrees: Vec<u8>,
    pub fsm: FsmState,
    pub edit: Option<EditSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryResponse {
    pub session_id: String,
    pub seed: u64,
    pub created_at: String,
    pub updated_at: String,
    pub initial_image: String,
    pub initial_image_hash: String,
    pub initial_degrees: Vec<u8>,
    pub fsm: FsmState,
    pub rounds: Vec<HistoryEntry>,
}

/// Content address of an image: SHA-256 of its pixel values.
pub fn image_hash(image: &ImageTensor) -> String {
    let mut h = Sha256::new();
    h.update((image.height as u64).to_le_bytes());
    h.update((image.width as u64).to_le_bytes());
    for p in &image.pixels {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn image_path(hash: &str) -> String {
    format!("/v1/images/{hash}.png")
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

fn attribute_names() -> Vec<String> {
    Attribute::ALL
        .iter()
        .map(|a| a.name().to_string())
        .collect()
}

/// Re-runs a session's user messages from its initial state.
pub fn replay(models: &DialogModels, record: &SessionRecord) -> talkedit_core::Result<DialogState> {
    let mut state = record.initial_state.clone();
    for e in &record.transcript {
        state = dialog_round(&state, &e.record.user_text, models)?.state;
    }
    Ok(state)
}

type SessionHandle = Arc<tokio::sync::Mutex<SessionRecord>>;

pub struct Service {
    models: Option<Arc<DialogModels>>,
    store: SessionStore,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    /// Hash to the latent that renders it.
    images: Mutex<HashMap<String, LatentCode>>,
}

impl Service {
    /// Opens the store and replays every session log in it.
    pub fn open(
        models: Option<Arc<DialogModels>>,
        store: SessionStore,
    ) -> Result<Self, ServiceError> {
        let records = store.load_all()?;
        let service = Self {
            models,
            store,
            sessions: Mutex::new(HashMap::new()),
            images: Mutex::new(HashMap::new()),
        };
        for r in records {
            service.register_image(&r.initial_image_hash, &r.initial_state.current_latent);
            for e in &r.transcript {
                if let Some(z) = &e.latent {
                    service.register_image(&e.image_hash, z);
                }
            }
            service.insert(r);
        }
        Ok(service)
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .sessions
            .lock()
            .expect("poisoned")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }

    pub fn session(&self, id: &str) -> Result<SessionHandle, ServiceError> {
        self.sessions
            .lock()
            .expect("poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    fn insert(&self, record: SessionRecord) {
        let id = record.session_id.clone();
        self.sessions
            .lock()
            .expect("poisoned")
            .insert(id, Arc::new(tokio::sync::Mutex::new(record)));
    }

    fn register_image(&self, hash: &str, latent: &LatentCode) {
        self.images
            .lock()
            .expect("poisoned")
            .insert(hash.to_string(), latent.clone());
    }

    fn models(&self) -> Result<Arc<DialogModels>, ServiceError> {
        self.models.clone().ok_or(ServiceError::Unavailable)
    }

    pub async fn create_session(&self, seed: Option<u64>) -> Result<SessionResponse, ServiceError> {
        let models = self.models()?;
        let seed = seed.unwrap_or_else(rand::random);
        let (state, hash) = tokio::task::spawn_blocking(move || -> talkedit_core::Result<_> {
            let state = DialogState::from_seed(&models, seed)?;
            let hash = image_hash(&models.backend.generate(&state.current_latent)?);
            Ok((state, hash))
        })
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))??;
        let session_id = loop {
            let id = format!("{:032x}", rand::random::<u128>());
            if !self.sessions.lock().expect("poisoned").contains_key(&id) {
                break id;
            }
        };
        let event = Event::Created {
            session_id: session_id.clone(),
            seed,
            created_at: now(),
            image_hash: hash.clone(),
            state: state.clone(),
        };
        self.store.create(&event)?;
        self.register_image(&hash, &state.current_latent);
        self.insert(self.store.load(&session_id)?);
        Ok(SessionResponse {
            session_id,
            seed,
            image: image_path(&hash),
            image_hash: hash,
            degrees: state.current_degrees.degrees().to_vec(),
            attributes: attribute_names(),
            fsm: state.fsm,
        })
    }

    /// Runs one round. The new state is persisted before it becomes visible.
    pub async fn post_message(
        &self,
        id: &str,
        text: &str,
    ) -> Result<MessageResponse, ServiceError> {
        let handle = self.session(id)?;
        let mut session = handle.try_lock_owned().map_err(|_| ServiceError::Busy)?;
        if session.state.fsm == FsmState::End {
            return Err(ServiceError::Ended);
        }
        if text.trim().is_empty() {
            return Err(ServiceError::Invalid("message text is empty".into()));
        }
        let models = self.models()?;
        let state = session.state.clone();
        let text = text.to_string();
        let (outcome, hash) = tokio::task::spawn_blocking(move || -> talkedit_core::Result<_> {
            let outcome = dialog_round(&state, &text, &models)?;
            let hash = image_hash(&models.backend.generate(&outcome.state.current_latent)?);
            Ok((outcome, hash))
        })
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))??;
        let event = Event::Round {
            at: now(),
            record: outcome.record.clone(),
            image_hash: hash.clone(),
            state: outcome.state.clone(),
        };
        self.store.append(id, &event)?;
        self.register_image(&hash, &outcome.state.current_latent);
        session.apply(event)?;
        Ok(MessageResponse {
            session_id: id.to_string(),
            round: outcome.state.round,
            feedback: outcome.feedback,
            image: image_path(&hash),
            image_hash: hash,
            degrees: outcome.state.current_degrees.degrees().to_vec(),
            fsm: outcome.state.fsm,
            edit: outcome.record.edit,
        })
    }

    pub async fn history(&self, id: &str) -> Result<HistoryResponse, ServiceError> {
        let handle = self.session(id)?;
        let r = handle.lock().await;
        Ok(HistoryResponse {
            session_id: r.session_id.clone(),
            seed: r.seed,
            created_at: r.created_at.clone(),
            updated_at: r.updated_at.clone(),
            initial_image: image_path(&r.initial_image_hash),
            initial_image_hash: r.initial_image_hash.clone(),
            initial_degrees: r.initial_state.current_degrees.degrees().to_vec(),
            fsm: r.state.fsm,
            rounds: r.transcript.clone(),
        })
    }

    pub fn image_png(&self, hash: &str) -> Result<Vec<u8>, ServiceError> {
        let z = self
            .images
            .lock()
            .expect("poisoned")
            .get(hash)
            .cloned()
            .ok_or_else(|| ServiceError::ImageNotFound(hash.to_string()))?;
        let models = self.models()?;
        Ok(models.backend.generate(&z)?.to_png()?)
    }
}

async fn create_handler(
    State(svc): State<Arc<Service>>,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let req: CreateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        CreateRequest::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ServiceError::Invalid(format!("bad request body: {e}")))?
    };
    let out = svc.create_session(req.seed).await?;
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn message_handler(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<MessageResponse>, ServiceError> {
    let req: MessageRequest = serde_json::from_slice(&body)
        .map_err(|e| ServiceError::Invalid(format!("bad request body: {e}")))?;
    Ok(Json(svc.post_message(&id, &req.text).await?))
}

async fn history_handler(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
) -> Result<Json<HistoryResponse>, ServiceError> {
    Ok(Json(svc.history(&id).await?))
}

async fn image_handler(
    State(svc): State<Arc<Service>>,
    Path(file): Path<String>,
) -> Result<Response, ServiceError> {
    let hash = file
        .strip_suffix(".png")
        .ok_or_else(|| ServiceError::ImageNotFound(file.clone()))?;
    let png = svc.image_png(hash)?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        png,
    )
        .into_response())
}

async fn not_found() -> ServiceError {
    ServiceError::NotFound("route".into())
}

pub fn router(service: Arc<Service>) -> Router {
    let v1 = Router::new()
        .route("/sessions", post(create_handler))
        .route("/sessions/{id}/messages", post(message_handler))
        .route("/sessions/{id}/history", get(history_handler))
        .route("/images/{file}", get(image_handler));
    Router::new()
        .nest("/v1", v1)
        .fallback(not_found)
        .with_state(service)
}

/// Serves until the listener fails or the process is stopped.
pub async fn serve(
    listener: tokio::net::TcpListener,
    service: Arc<Service>,
) -> std::io::Result<()> {
    axum::serve(listener, router(service)).await
}
