//! HTTP endpoints: `/scene/meta`, `/mpi?t=` and `/render?t=&pose=`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use temporal_mpi::geometry::{Camera, CameraJson};
use temporal_mpi::mpi::PlanesJson;
use tower_http::cors::CorsLayer;

use crate::state::ServeState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    #[serde(rename = "T")]
    pub timestamps: usize,
    #[serde(rename = "D")]
    pub planes: usize,
    #[serde(rename = "N_basis")]
    pub basis: usize,
    /// Far to near.
    pub depths: Vec<f64>,
    pub pad: usize,
    pub near: f64,
    pub far: f64,
    pub reference_id: String,
    pub reference: CameraJson,
    /// Padded plane size in texels.
    pub extent: Extent,
}

/// A time instance as one RGBA atlas (planes left to right, far to near)
/// plus the export sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpiResponse {
    pub t: usize,
    pub planes: usize,
    pub plane_width: usize,
    pub plane_height: usize,
    pub atlas_width: usize,
    pub atlas_height: usize,
    /// Base64 PNG.
    pub atlas_png: String,
    pub sidecar: PlanesJson,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

/// Largest server-side render accepted, in pixels.
pub const MAX_RENDER_PIXELS: usize = 4096 * 4096;

type Params = Query<HashMap<String, String>>;

pub fn router(state: Arc<ServeState>) -> Router {
    Router::new()
        .route("/scene/meta", get(meta))
        .route("/mpi", get(mpi))
        .route("/render", get(render))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

pub async fn serve(state: Arc<ServeState>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

pub fn scene_meta(state: &ServeState) -> SceneMeta {
    let h = &state.baked.header;
    SceneMeta {
        timestamps: h.timestamps,
        planes: h.planes,
        basis: h.basis,
        depths: h.depths.clone(),
        pad: h.pad,
        near: h.near,
        far: h.far,
        reference_id: h.reference_id.clone(),
        reference: h.reference.clone().into(),
        extent: Extent {
            width: h.width,
            height: h.height,
        },
    }
}

async fn meta(State(state): State<Arc<ServeState>>) -> Json<SceneMeta> {
    Json(scene_meta(&state))
}

fn parse_t(state: &ServeState, params: &HashMap<String, String>) -> Result<usize, ApiError> {
    let range = format!("[1, {}]", state.timestamps());
    let raw = params
        .get("t")
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("missing t; valid range is {range}")))?;
    match raw.parse::<usize>() {
        Ok(t) if (1..=state.timestamps()).contains(&t) => Ok(t),
        _ => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("no time instance t={raw}; valid range is {range}"),
        )),
    }
}

async fn mpi(State(state): State<Arc<ServeState>>, Query(params): Params) -> Result<Response, ApiError> {
    let t = parse_t(&state, &params)?;
    let vol = state.volume(t).await.map_err(ApiError::internal)?;
    let reference = state.baked.header.reference.clone();
    let raw_png = params.get("format").is_some_and(|f| f == "png");
    let body = tokio::task::spawn_blocking(move || -> temporal_mpi::Result<Response> {
        let atlas = vol.atlas();
        let png = atlas.encode_png()?;
        if raw_png {
            return Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response());
        }
        Ok(Json(MpiResponse {
            t,
            planes: vol.depth_count(),
            plane_width: vol.width,
            plane_height: vol.height,
            atlas_width: atlas.width,
            atlas_height: atlas.height,
            atlas_png: base64::engine::general_purpose::STANDARD.encode(png),
            sidecar: vol.sidecar(&reference),
        })
        .into_response())
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    Ok(body)
}

async fn render(State(state): State<Arc<ServeState>>, Query(params): Params) -> Result<Response, ApiError> {
    let t = parse_t(&state, &params)?;
    let pose = params
        .get("pose")
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing pose (camera JSON)"))?;
    let camera: Camera = serde_json::from_str::<CameraJson>(pose)
        .map_err(|e| e.to_string())
        .and_then(|c| Camera::try_from(c).map_err(|e| e.to_string()))
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed pose: {e}")))?;
    if camera.width as usize * camera.height as usize > MAX_RENDER_PIXELS {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("render size {}x{} is too large", camera.width, camera.height),
        ));
    }
    let vol = state.volume(t).await.map_err(ApiError::internal)?;
    let reference = state.baked.header.reference.clone();
    let png = tokio::task::spawn_blocking(move || vol.render_view(&reference, &camera)?.encode_png())
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
