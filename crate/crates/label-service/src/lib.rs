//! HTTP backend for the annotation UI.
//!
//! | route | |
//! |---|---|
//! | `GET /api/samples` | sample ids in timestamp order with per-band versions |
//! | `GET /api/samples/{id}/context?before=3&after=3` | target plus temporal neighbours |
//! | `GET /api/images/{id}/{band}.png?stretch=99.5` | display PNG |
//! | `PUT /api/annotations/{id}/{band}` | optimistic box write, propagated to linked bands |
//! | `POST /api/export` | writes a dataset manifest of everything annotated |

mod store;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use mlmt_core::data::{BoundingBox, Raster, Timestamp};
use mlmt_core::synthetic::percentile;

pub use store::{AnnotationRecord, Store, StoreConfig};

pub const DEFAULT_CONTEXT: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("version conflict: expected {expected}, stored {current}")]
    Conflict { expected: u64, current: u64 },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] mlmt_core::error::Error),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    fn io(p: &std::path::Path, e: std::io::Error) -> Self {
        Self::Internal(format!("{}: {e}", p.display()))
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Conflict { .. } => StatusCode::CONFLICT,
            Self::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Core(_) | Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = serde_json::json!({ "error": self.to_string() });
        if let Self::Conflict { current, .. } = self {
            body["version"] = current.into();
        }
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSummary {
    pub sample_id: String,
    pub timestamp: Timestamp,
    /// Record version per band.
    pub versions: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandView {
    pub band: String,
    pub layer_index: i64,
    pub image: String,
    pub boxes: Vec<BoundingBox>,
    pub version: u64,
    /// Bands sharing this band's boxes, itself included.
    pub linked: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleView {
    pub sample_id: String,
    pub timestamp: Timestamp,
    pub height: usize,
    pub width: usize,
    pub bands: Vec<BandView>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextView {
    pub target: String,
    /// Neighbours actually returned on each side.
    pub before: usize,
    pub after: usize,
    pub samples: Vec<SampleView>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PutAnnotation {
    pub boxes: Vec<BoundingBox>,
    pub expected_version: u64,
    #[serde(default)]
    pub author: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExportRequest {
    #[serde(default)]
    pub format: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportResponse {
    pub manifest: PathBuf,
    pub samples: usize,
    pub records: Vec<AnnotationRecord>,
}

#[derive(Debug, Deserialize)]
struct ContextQuery {
    before: Option<usize>,
    after: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct ImageQuery {
    /// Upper percentile of the display stretch; the lower one mirrors it.
    stretch: Option<f64>,
}

type AppState = Arc<Store>;

pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/api/samples", get(list_samples))
        .route("/api/samples/{id}/context", get(context))
        .route("/api/images/{id}/{file}", get(image))
        .route("/api/annotations/{id}/{band}", put(put_annotation).get(get_annotation))
        .route("/api/export", post(export))
        .with_state(store)
}

/// Serves until ctrl-c.
pub async fn serve(store: Store, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("label service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(store)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn list_samples(State(store): State<AppState>) -> Result<Json<Vec<SampleSummary>>, ServiceError> {
    let mut out = Vec::new();
    for id in store.sample_ids() {
        let mut versions = BTreeMap::new();
        for b in store.bands() {
            versions.insert(b.clone(), store.record(id, &b)?.version);
        }
        out.push(SampleSummary {
            sample_id: id.to_string(),
            timestamp: store.timestamp(id)?.clone(),
            versions,
        });
    }
    Ok(Json(out))
}

fn sample_view(store: &Store, id: &str) -> Result<SampleView, ServiceError> {
    let (height, width) = store.size(id)?;
    let bands = store
        .bands()
        .into_iter()
        .map(|b| {
            let rec = store.record(id, &b)?;
            Ok(BandView {
                layer_index: store.band_layer(&b).unwrap_or_default(),
                image: format!("/api/images/{id}/{b}.png"),
                boxes: rec.boxes,
                version: rec.version,
                linked: store.linked(&b).to_vec(),
                band: b,
            })
        })
        .collect::<Result<_, ServiceError>>()?;
    Ok(SampleView {
        sample_id: id.to_string(),
        timestamp: store.timestamp(id)?.clone(),
        height,
        width,
        bands,
    })
}

async fn context(
    State(store): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ContextQuery>,
) -> Result<Json<ContextView>, ServiceError> {
    let ids = store.context(&id, q.before.unwrap_or(DEFAULT_CONTEXT), q.after.unwrap_or(DEFAULT_CONTEXT))?;
    let at = ids.iter().position(|s| *s == id).expect("target is in its context");
    let samples = ids.iter().map(|s| sample_view(&store, s)).collect::<Result<_, _>>()?;
    Ok(Json(ContextView {
        before: at,
        after: ids.len() - at - 1,
        target: id,
        samples,
    }))
}

async fn image(
    State(store): State<AppState>,
    Path((id, file)): Path<(String, String)>,
    Query(q): Query<ImageQuery>,
) -> Result<Response, ServiceError> {
    let band = file
        .strip_suffix(".png")
        .ok_or_else(|| ServiceError::NotFound(format!("image {file}")))?;
    if let Some(p) = q.stretch {
        if !(50.0..=100.0).contains(&p) {
            return Err(ServiceError::Invalid(format!("stretch must be in [50, 100], got {p}")));
        }
    }
    let raster = store.image(&id, band)?;
    let version = store.record(&id, band)?.version;
    let bytes = encode_display_png(&raster, q.stretch)?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::HeaderName::from_static("x-record-version"), version.to_string()),
        ],
        bytes,
    )
        .into_response())
}

async fn get_annotation(
    State(store): State<AppState>,
    Path((id, band)): Path<(String, String)>,
) -> Result<Json<AnnotationRecord>, ServiceError> {
    Ok(Json(store.record(&id, &band)?))
}

async fn put_annotation(
    State(store): State<AppState>,
    Path((id, band)): Path<(String, String)>,
    Json(body): Json<PutAnnotation>,
) -> Result<Json<AnnotationRecord>, ServiceError> {
    let author = body.author.as_deref().unwrap_or("anonymous");
    let rec = store.put(&id, &band, body.boxes, body.expected_version, author)?;
    log::debug!("{id}/{band} -> v{}", rec.version);
    Ok(Json(rec))
}

async fn export(
    State(store): State<AppState>,
    body: Option<Json<ExportRequest>>,
) -> Result<Json<ExportResponse>, ServiceError> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    if let Some(f) = req.format.as_deref() {
        if f != "manifest" {
            return Err(ServiceError::Invalid(format!("unknown export format {f}")));
        }
    }
    let (manifest, records) = store.export()?;
    Ok(Json(ExportResponse {
        samples: store.annotated().len(),
        manifest,
        records,
    }))
}

/// 8-bit grayscale; with `stretch = p` the `[100-p, p]` percentile range
/// maps onto the full scale, otherwise `[0, 1]` does.
pub fn encode_display_png(r: &Raster, stretch: Option<f64>) -> Result<Vec<u8>, ServiceError> {
    let (lo, hi) = match stretch {
        Some(p) => (percentile(&r.data, 100.0 - p), percentile(&r.data, p)),
        None => (0.0, 1.0),
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = r
        .data
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, r.width as u32, r.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| ServiceError::Internal(e.to_string());
    let mut w = enc.write_header().map_err(err)?;
    w.write_image_data(&pixels).map_err(err)?;
    w.finish().map_err(err)?;
    Ok(out)
}
