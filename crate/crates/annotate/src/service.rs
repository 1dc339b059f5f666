//! HTTP/JSON API over the record store.

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{SecondsFormat, Utc};
use dmsl_core::manifest::resolve;
use dmsl_core::raster::Raster;
use dmsl_core::{BoundaryBox, Spectrum, Variation};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::detector::Detector;
use crate::error::AnnotateError;
use crate::ops::{annotate_store, calibrate, parse_submission, JobProgress};
use crate::store::{HistoryEntry, ListFilter, Store};

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    #[default]
    Idle,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct JobStatus {
    pub state: JobState,
    pub detector: Option<String>,
    pub started_at: Option<String>,
    pub finished_at: Option<String>,
    pub progress: JobProgress,
    pub error: Option<String>,
}

struct Inner {
    store: Mutex<Store>,
    image_root: PathBuf,
    detector: Arc<dyn Detector>,
    job: Mutex<JobStatus>,
}

/// Shared service state: the store, the directory image paths are relative
/// to, and the detector used by annotation jobs.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(store: Store, image_root: impl Into<PathBuf>, detector: Arc<dyn Detector>) -> Self {
        Self(Arc::new(Inner {
            store: Mutex::new(store),
            image_root: image_root.into(),
            detector,
            job: Mutex::new(JobStatus::default()),
        }))
    }

    pub fn job_status(&self) -> JobStatus {
        self.0.job.lock().expect("job lock").clone()
    }

    pub fn with_store<T>(&self, f: impl FnOnce(&mut Store) -> T) -> T {
        f(&mut self.0.store.lock().expect("store lock"))
    }
}

pub struct ApiError(AnnotateError);

impl From<AnnotateError> for ApiError {
    fn from(e: AnnotateError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let e = self.0;
        let (status, body) = match &e {
            AnnotateError::NotFound(id) => (StatusCode::NOT_FOUND, json!({"error": "not_found", "record_id": id})),
            AnnotateError::Conflict { current, .. } => (
                StatusCode::CONFLICT,
                json!({"error": "version_conflict", "current_version": current}),
            ),
            AnnotateError::InvalidPoints(points) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": "validation", "invalid_points": points}),
            ),
            _ if e.is_validation() => (StatusCode::UNPROCESSABLE_ENTITY, json!({"error": "validation"})),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, json!({"error": "internal"})),
        };
        let mut body = body;
        body["message"] = json!(e.to_string());
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn invalid(msg: String) -> ApiError {
    ApiError(AnnotateError::Validation(msg))
}

// Empty query values (`?fold=`) mean "no filter".
fn opt_param<T: std::str::FromStr>(name: &str, v: &Option<String>) -> ApiResult<Option<T>> {
    match v.as_deref().map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|_| invalid(format!("bad value `{s}` for `{name}`"))),
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct ListQuery {
    pub fold: Option<String>,
    pub variation: Option<String>,
    pub calibrated: Option<String>,
    pub offset: Option<String>,
    pub limit: Option<String>,
}

async fn list_records(State(st): State<AppState>, Query(q): Query<ListQuery>) -> ApiResult<Response> {
    let variation = match q.variation.as_deref().map(str::trim) {
        None | Some("") => None,
        Some(s) => Some(s.parse::<Variation>().map_err(|e| invalid(e.to_string()))?),
    };
    let limit = opt_param::<usize>("limit", &q.limit)?.unwrap_or(DEFAULT_PAGE);
    if limit == 0 || limit > MAX_PAGE {
        return Err(invalid(format!("limit must be in 1..={MAX_PAGE}")));
    }
    let filter = ListFilter {
        fold: opt_param("fold", &q.fold)?,
        variation,
        calibrated: opt_param("calibrated", &q.calibrated)?,
        offset: opt_param("offset", &q.offset)?.unwrap_or(0),
        limit,
    };
    let page = st.with_store(|s| s.list(&filter))?;
    Ok(Json(page).into_response())
}

#[derive(Debug, Deserialize)]
pub struct ImageQuery {
    pub spectrum: Option<String>,
}

async fn record_image(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ImageQuery>,
) -> ApiResult<Response> {
    let spectrum: Spectrum = match q.spectrum.as_deref() {
        None | Some("") => Spectrum::Vis,
        Some(s) => s.parse().map_err(|e: dmsl_core::Error| invalid(e.to_string()))?,
    };
    let rec = st.with_store(|s| s.get(&id))?.record;
    let path = resolve(&st.0.image_root, rec.path(spectrum));
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>, AnnotateError> {
        let raster = Raster::load(&path)?;
        let mut buf = Cursor::new(Vec::new());
        raster
            .to_dynamic()
            .write_to(&mut buf, image::ImageFormat::Png)
            .map_err(dmsl_core::Error::from)?;
        Ok(buf.into_inner())
    })
    .await
    .map_err(|e| ApiError(AnnotateError::Validation(format!("image task failed: {e}"))))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LandmarksView {
    pub record_id: String,
    pub version: i64,
    pub calibrated: bool,
    pub landmarks: Option<Vec<f64>>,
    pub boundary: Option<BoundaryBox>,
    pub history: Vec<HistoryEntry>,
}

async fn get_landmarks(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<LandmarksView>> {
    let (rec, history) = st.with_store(|s| Ok::<_, AnnotateError>((s.get(&id)?, s.history(&id)?)))?;
    Ok(Json(LandmarksView {
        record_id: rec.record.record_id.clone(),
        version: rec.version,
        calibrated: rec.record.calibrated,
        landmarks: rec.record.landmarks.as_ref().map(|l| l.flatten()),
        boundary: rec.record.boundary,
        history,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PutLandmarks {
    pub landmarks: Vec<f64>,
    pub version: i64,
    pub editor_id: String,
}

async fn put_landmarks(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<PutLandmarks>,
) -> ApiResult<Response> {
    let l = parse_submission(&body.landmarks)?;
    let rec = st.with_store(|s| calibrate(s, &id, &l, &body.editor_id, Some(body.version)))?;
    Ok(Json(rec).into_response())
}

#[derive(Debug, Default, Deserialize)]
pub struct RunRequest {
    #[serde(default)]
    pub force: bool,
}

async fn run_annotation(State(st): State<AppState>, body: Option<Json<RunRequest>>) -> ApiResult<Response> {
    let force = body.map(|b| b.0.force).unwrap_or(false);
    {
        let mut job = st.0.job.lock().expect("job lock");
        if job.state == JobState::Running {
            return Ok((StatusCode::CONFLICT, Json(json!({"error": "job_running"}))).into_response());
        }
        *job = JobStatus {
            state: JobState::Running,
            detector: Some(st.0.detector.name().to_string()),
            started_at: Some(Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)),
            ..Default::default()
        };
    }
    let inner = st.0.clone();
    tokio::task::spawn_blocking(move || {
        let result = annotate_store(&inner.store, &inner.image_root, inner.detector.as_ref(), force, &mut |p| {
            inner.job.lock().expect("job lock").progress = p.clone();
        });
        let mut job = inner.job.lock().expect("job lock");
        job.finished_at = Some(Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true));
        match result {
            Ok(p) => {
                job.progress = p;
                job.state = JobState::Done;
            }
            Err(e) => {
                log::error!("annotation job failed: {e}");
                job.error = Some(e.to_string());
                job.state = JobState::Failed;
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(st.job_status())).into_response())
}

async fn annotation_status(State(st): State<AppState>) -> Json<JobStatus> {
    Json(st.job_status())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/records", get(list_records))
        .route("/records/{id}/image", get(record_image))
        .route("/records/{id}/landmarks", get(get_landmarks).put(put_landmarks))
        .route("/annotate/run", post(run_annotation))
        .route("/annotate/status", get(annotation_status))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
