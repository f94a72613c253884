use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nariqa_core::corpus::write_manifest_to;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::error::StudyError;
use crate::images::ImageStore;
use crate::state::{Ack, RaterProgress, StudyState};
use crate::vote::{Permutation, Side, VoteRecord};

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Also send the aligned (undistorted target) image.
    pub show_aligned: bool,
    /// Directory with the built UI bundle, served at `/`.
    pub static_dir: Option<PathBuf>,
}

#[derive(Clone)]
struct App {
    study: Arc<Mutex<StudyState>>,
    images: Arc<ImageStore>,
    show_aligned: bool,
}

impl App {
    fn study(&self) -> MutexGuard<'_, StudyState> {
        self.study.lock().unwrap_or_else(PoisonError::into_inner)
    }
}

/// What the UI needs to show one triplet. Candidate URLs are already in
/// presentation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub done: bool,
    pub rater_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Permutation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<RaterProgress>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct VoteBody {
    pub triplet_id: String,
    pub rater_id: String,
    /// Canonical choice (0 = first candidate in the manifest).
    #[serde(default)]
    pub choice: Option<u8>,
    /// Alternatively the side clicked; translated through the permutation.
    #[serde(default)]
    pub side: Option<Side>,
    /// Token from the descriptor, echoed back.
    #[serde(default)]
    pub permutation: Option<Permutation>,
    #[serde(default)]
    pub dwell_ms: Option<u64>,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

struct ApiError(StatusCode, String);

impl From<StudyError> for ApiError {
    fn from(e: StudyError) -> Self {
        let status = match e {
            StudyError::UnknownTriplet(_) => StatusCode::NOT_FOUND,
            StudyError::InvalidRater(_) | StudyError::InvalidChoice(_) | StudyError::InvalidVote(_) => {
                StatusCode::BAD_REQUEST
            }
            StudyError::PermutationMismatch { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

pub fn router(study: StudyState, images: ImageStore, opts: ServerOptions) -> Router {
    let app = App {
        study: Arc::new(Mutex::new(study)),
        images: Arc::new(images),
        show_aligned: opts.show_aligned,
    };
    let api = Router::new()
        .route("/api/v1/next", get(next))
        .route("/api/v1/triplet/{id}", get(triplet))
        .route("/api/v1/vote", post(vote))
        .route("/api/v1/progress", get(progress))
        .route("/api/v1/export", get(export))
        .route("/img/{file}", get(image))
        .with_state(app);
    match opts.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Deserialize)]
struct RaterQuery {
    rater: Option<String>,
}

async fn describe(app: &App, triplet_id: String, rater: Option<String>, progress: Option<RaterProgress>) -> ApiResult<Descriptor> {
    let (rec, permutation) = {
        let s = app.study();
        let rec = s.record(&triplet_id)?.clone();
        let p = rater.as_deref().map_or(Permutation::Identity, |r| s.permutation(r, &triplet_id));
        (rec, p)
    };
    let store = app.images.clone();
    let imgs = tokio::task::spawn_blocking(move || store.images_for(&rec)).await??;
    let url = |h: &str| format!("/img/{h}.png");
    let left = permutation.canonical(Side::Left) as usize;
    Ok(Descriptor {
        done: false,
        rater_id: rater,
        triplet_id: Some(triplet_id),
        reference_url: Some(url(&imgs.reference)),
        left_url: Some(url(&imgs.candidates[left])),
        right_url: Some(url(&imgs.candidates[1 - left])),
        aligned_url: app.show_aligned.then(|| url(&imgs.aligned)),
        permutation: Some(permutation),
        progress,
    })
}

async fn next(State(app): State<App>, Query(q): Query<RaterQuery>) -> ApiResult<Json<Descriptor>> {
    let rater = q
        .rater
        .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "missing `rater` query parameter".into()))?;
    let assignment = app.study().assign_next(&rater, now_ms())?;
    match assignment.triplet {
        Some(p) => Ok(Json(describe(&app, p.triplet_id, Some(rater), Some(assignment.progress)).await?)),
        None => Ok(Json(Descriptor {
            done: true,
            rater_id: Some(rater),
            triplet_id: None,
            reference_url: None,
            left_url: None,
            right_url: None,
            aligned_url: None,
            permutation: None,
            progress: Some(assignment.progress),
        })),
    }
}

async fn triplet(State(app): State<App>, Path(id): Path<String>, Query(q): Query<RaterQuery>) -> ApiResult<Json<Descriptor>> {
    if let Some(r) = &q.rater {
        crate::vote::validate_rater(r)?;
    }
    Ok(Json(describe(&app, id, q.rater, None).await?))
}

async fn image(State(app): State<App>, Path(file): Path<String>) -> ApiResult<Response> {
    let not_found = || ApiError(StatusCode::NOT_FOUND, format!("no image `{file}`"));
    let hash = file.strip_suffix(".png").ok_or_else(not_found)?;
    let png = app.images.png(hash).ok_or_else(not_found)?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        png.as_ref().clone(),
    )
        .into_response())
}

async fn vote(State(app): State<App>, body: Result<Json<VoteBody>, JsonRejection>) -> ApiResult<Json<Ack>> {
    let Json(b) = body.map_err(|e| ApiError(e.status(), e.body_text()))?;
    let choice = match (b.choice, b.side) {
        (Some(c), None) => c,
        (None, Some(side)) => {
            let p = b
                .permutation
                .unwrap_or_else(|| app.study().permutation(&b.rater_id, &b.triplet_id));
            p.canonical(side)
        }
        _ => {
            return Err(ApiError(
                StatusCode::BAD_REQUEST,
                "exactly one of `choice` and `side` is required".into(),
            ))
        }
    };
    let record = VoteRecord {
        triplet_id: b.triplet_id,
        rater_id: b.rater_id,
        choice,
        timestamp_ms: now_ms(),
        permutation: b.permutation,
        dwell_ms: b.dwell_ms,
        idempotency_key: b.idempotency_key,
    };
    let study = app.study.clone();
    // The lock is held across the synced append, so log writes are serialized.
    let ack = tokio::task::spawn_blocking(move || {
        study.lock().unwrap_or_else(PoisonError::into_inner).record_vote(record)
    })
    .await??;
    Ok(Json(ack))
}

async fn progress(State(app): State<App>) -> Json<crate::state::StudyProgress> {
    Json(app.study().progress())
}

#[derive(Deserialize)]
struct ExportQuery {
    part: Option<String>,
}

async fn export(State(app): State<App>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let (manifest, agg) = app.study().labeled_manifest();
    match q.part.as_deref() {
        None | Some("manifest") => {
            let mut body = Vec::new();
            write_manifest_to(&manifest, &mut body)
                .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
        }
        Some("tallies") => Ok(Json(agg).into_response()),
        Some(other) => Err(ApiError(StatusCode::BAD_REQUEST, format!("unknown export part `{other}`"))),
    }
}
