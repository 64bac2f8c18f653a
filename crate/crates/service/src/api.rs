//! HTTP handlers. JSON for control, `.npy`/PNG bytes for tensors and masks.

use std::io::Cursor;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cop_core::labels::{parse_type_sidecar, LabelMap};
use cop_core::npy;
use cop_core::tensor::{FeaturePair, ImagePoint, Level};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{ApiError, ApiResult};
use crate::session::{ChainOverrides, ClickDelta, MaskSummary, Session, SessionMetrics, TypeState};
use crate::store::SessionStore;
use crate::ServiceConfig;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    pub config: Arc<ServiceConfig>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            store: Arc::new(SessionStore::new(config.max_sessions)),
            config: Arc::new(config),
        }
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        Uuid::parse_str(id)
            .ok()
            .and_then(|u| self.store.get(&u))
            .ok_or_else(|| ApiError::session_not_found(id))
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_state).delete(delete_session))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/click", post(click))
        .route("/sessions/{id}/metrics", get(get_metrics))
        .route("/sessions/{id}/types/{type_id}/reset", post(reset_type))
        .route("/sessions/{id}/masks", get(get_masks))
        .route("/sessions/{id}/image", get(get_image))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

#[derive(Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub sessions: usize,
}

async fn healthz(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        sessions: state.store.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: Uuid,
    pub image_rows: usize,
    pub image_cols: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub channels: usize,
    pub has_image: bool,
    pub has_gt: bool,
}

impl SessionInfo {
    fn of(s: &Session) -> Self {
        let (image_rows, image_cols) = s.image_dims();
        Self {
            id: s.id,
            image_rows,
            image_cols,
            grid_rows: s.features.rows(),
            grid_cols: s.features.cols(),
            channels: s.features.high().channels(),
            has_image: s.image.is_some(),
            has_gt: s.gt.is_some(),
        }
    }
}

#[derive(Default)]
struct Upload {
    fh: Option<Bytes>,
    fl: Option<Bytes>,
    image: Option<Bytes>,
    gt: Option<Bytes>,
    types: Option<Bytes>,
}

async fn read_upload(mut mp: Multipart) -> ApiResult<Upload> {
    let mut up = Upload::default();
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(format!("malformed multipart body: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let slot = match name.as_str() {
            "fh" => &mut up.fh,
            "fl" => &mut up.fl,
            "image" => &mut up.image,
            "gt" => &mut up.gt,
            "types" => &mut up.types,
            _ => return Err(ApiError::bad_request(format!("unexpected part `{name}`")).with_field(&name)),
        };
        let bytes = field.bytes().await.map_err(|e| {
            let status = if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                StatusCode::PAYLOAD_TOO_LARGE
            } else {
                StatusCode::BAD_REQUEST
            };
            ApiError::new(status, "invalid_input", format!("cannot read part `{name}`: {e}")).with_field(&name)
        })?;
        *slot = Some(bytes);
    }
    Ok(up)
}

fn features_from(bytes: &[u8], level: Level, field: &str) -> ApiResult<cop_core::tensor::FeatureMap> {
    npy::decode(bytes)
        .and_then(|a| npy::feature_map_from_array(a, level))
        .map_err(|e| ApiError::from_core(e, Some(field)))
}

fn png_dims(bytes: &[u8]) -> ApiResult<(usize, usize)> {
    let reader = png::Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(|e| ApiError::bad_request(format!("image must be a PNG: {e}")).with_field("image"))?;
    let info = reader.info();
    Ok((info.height as usize, info.width as usize))
}

fn dims_mismatch(field: &str, what: (usize, usize), want: (usize, usize)) -> ApiError {
    ApiError::new(
        StatusCode::BAD_REQUEST,
        "dimension_mismatch",
        format!(
            "{field} is {}x{} but the features imply a {}x{} image",
            what.0, what.1, want.0, want.1
        ),
    )
    .with_field(field)
}

fn build_session(up: Upload, config: &ServiceConfig) -> ApiResult<Session> {
    let features = match (&up.fh, &up.fl) {
        (Some(fh), Some(fl)) => {
            let high = features_from(fh, Level::High, "fh")?;
            let low = features_from(fl, Level::Low, "fl")?;
            FeaturePair::new(high, low).map_err(|e| ApiError::from_core(e, Some("fl")))?
        }
        (None, None) => match (&up.image, &config.extract) {
            (Some(image), Some(cmd)) => {
                let dir = tempfile::tempdir().map_err(|e| ApiError::internal(e.to_string()))?;
                let path = dir.path().join("image.png");
                std::fs::write(&path, image).map_err(|e| ApiError::internal(e.to_string()))?;
                let (pair, _, _) = cmd.run(&path, dir.path(), "image").map_err(|e| {
                    ApiError::new(StatusCode::BAD_GATEWAY, "extract_failed", e.to_string()).with_field("image")
                })?;
                pair
            }
            _ => {
                return Err(ApiError::bad_request("`fh` and `fl` feature files are required").with_field("fh"));
            }
        },
        (None, Some(_)) => return Err(ApiError::bad_request("`fh` is missing").with_field("fh")),
        (Some(_), None) => return Err(ApiError::bad_request("`fl` is missing").with_field("fl")),
    };
    let dims = features.image_dims();

    if let Some(image) = &up.image {
        let got = png_dims(image)?;
        if got != dims {
            return Err(dims_mismatch("image", got, dims));
        }
    }

    let gt = match &up.gt {
        Some(bytes) => {
            let map = if bytes.starts_with(b"\x93NUMPY") {
                npy::decode(bytes).and_then(LabelMap::from_array)
            } else {
                LabelMap::from_png_bytes(bytes)
            }
            .map_err(|e| ApiError::from_core(e, Some("gt")))?;
            let map = match &up.types {
                Some(json) => {
                    let text = std::str::from_utf8(json)
                        .map_err(|_| ApiError::bad_request("types must be UTF-8 JSON").with_field("types"))?;
                    let table = parse_type_sidecar(text).map_err(|e| ApiError::from_core(e, Some("types")))?;
                    map.with_types(table).map_err(|e| ApiError::from_core(e, Some("types")))?
                }
                None => map,
            };
            if (map.rows(), map.cols()) != dims {
                return Err(dims_mismatch("gt", (map.rows(), map.cols()), dims));
            }
            Some(map)
        }
        None if up.types.is_some() => {
            return Err(ApiError::bad_request("`types` needs a `gt` label map").with_field("types"))
        }
        None => None,
    };

    Ok(Session::new(features, up.image.map(|b| b.to_vec()), gt))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn create_session(State(state): State<AppState>, mp: Multipart) -> ApiResult<Json<SessionInfo>> {
    let up = read_upload(mp).await?;
    let config = state.config.clone();
    let session = blocking(move || build_session(up, &config)).await?;
    let (session, evicted) = state.store.insert(session);
    for id in evicted {
        tracing::info!(%id, "evicted session");
    }
    tracing::info!(id = %session.id, "created session");
    Ok(Json(SessionInfo::of(&session)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClickRequest {
    pub x: i64,
    pub y: i64,
    pub type_id: u32,
    #[serde(default)]
    pub config: Option<ChainOverrides>,
}

async fn click(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ClickRequest>, JsonRejection>,
) -> ApiResult<Json<ClickDelta>> {
    let session = state.session(&id)?;
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let point = ImagePoint::try_from_signed(req.x, req.y).map_err(|e| {
        let field = if req.x < 0 { "x" } else { "y" };
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "out_of_bounds", e.to_string()).with_field(field)
    })?;
    let chain = req.config.unwrap_or_default().apply(&state.config.chain);
    chain.validate().map_err(|e| ApiError::from_core(e, Some("config")))?;
    let nms_iou = state.config.nms_iou;
    let delta = blocking(move || session.click(point, req.type_id, &chain, nms_iou)).await?;
    Ok(Json(delta))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionStateBody {
    #[serde(flatten)]
    pub info: SessionInfo,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub types: Vec<TypeState>,
    pub masks: Vec<MaskSummary>,
}

async fn get_state(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionStateBody>> {
    let session = state.session(&id)?;
    let snap = session.snapshot();
    Ok(Json(SessionStateBody {
        info: SessionInfo::of(&session),
        created_ms: session.created_ms,
        updated_ms: snap.updated_ms,
        types: snap.types.values().cloned().collect(),
        masks: snap.mask_summaries(),
    }))
}

async fn get_metrics(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionMetrics>> {
    let session = state.session(&id)?;
    Ok(Json(blocking(move || session.metrics()).await?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResetResponse {
    pub type_id: u32,
    pub removed_masks: Vec<u64>,
}

async fn reset_type(
    State(state): State<AppState>,
    Path((id, type_id)): Path<(String, u32)>,
) -> ApiResult<Json<ResetResponse>> {
    let session = state.session(&id)?;
    let removed_masks = session.reset_type(type_id).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "type_not_found",
            format!("type {type_id} has no state in this session"),
        )
        .with_field("type_id")
    })?;
    Ok(Json(ResetResponse { type_id, removed_masks }))
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let removed = Uuid::parse_str(&id).map(|u| state.store.remove(&u)).unwrap_or(false);
    if removed {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::session_not_found(&id))
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct MasksQuery {
    #[serde(default)]
    pub format: Option<String>,
}

fn bytes_response(content_type: &'static str, bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, content_type)], Body::from(bytes)).into_response()
}

async fn get_masks(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<MasksQuery>,
) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let map = session.label_map()?;
    match q.format.as_deref().unwrap_or("npy") {
        "npy" => Ok(bytes_response("application/octet-stream", map.to_npy_bytes())),
        "png" => Ok(bytes_response("image/png", map.to_png_bytes()?)),
        other => Err(ApiError::bad_request(format!("unknown format `{other}` (npy or png)")).with_field("format")),
    }
}

async fn get_image(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = state.session(&id)?;
    match &session.image {
        Some(bytes) => Ok(bytes_response("image/png", bytes.clone())),
        None => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "no_image",
            "no image was uploaded with this session",
        )),
    }
}
