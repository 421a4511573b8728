//! HTTP front end. The router answers immediately; `/screen` and `/model`
//! return 503 until a bundle has been installed in the shared state.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use redreflex::bundle::sha256_hex;

use crate::screen::{EyeChoice, ScreenError, Screener};

/// Shared, write-once service state.
#[derive(Default)]
pub struct AppState {
    screener: OnceLock<Arc<Screener>>,
    retain_uploads: Option<PathBuf>,
}

impl AppState {
    pub fn new(retain_uploads: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            screener: OnceLock::new(),
            retain_uploads,
        })
    }

    /// Installs the loaded bundle. Later calls are ignored.
    pub fn install(&self, screener: Screener) {
        if self.screener.set(Arc::new(screener)).is_err() {
            log::warn!("a bundle is already installed; ignoring the new one");
        }
    }

    pub fn screener(&self) -> Option<Arc<Screener>> {
        self.screener.get().cloned()
    }
}

pub fn router(state: Arc<AppState>, max_upload_bytes: usize) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model", get(model))
        .route("/screen", post(screen))
        .layer(DefaultBodyLimit::max(max_upload_bytes))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn not_ready() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "model bundle not loaded")
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.screener() {
        Some(s) => Json(json!({ "status": "ok", "model_version": s.version })).into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading", "model_version": null }))).into_response(),
    }
}

async fn model(State(state): State<Arc<AppState>>) -> Response {
    match state.screener() {
        Some(s) => Json(s.bundle.metadata(&s.version)).into_response(),
        None => not_ready(),
    }
}

#[derive(Debug, Default, Deserialize)]
struct ScreenQuery {
    eye: Option<String>,
}

/// Image bytes from either a raw body or the first multipart file field.
async fn upload_bytes(req: Request) -> Result<Bytes, Response> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if !is_multipart {
        return Bytes::from_request(req, &())
            .await
            .map_err(|e| error(e.status(), e.body_text()));
    }
    let mut form = Multipart::from_request(req, &())
        .await
        .map_err(|e| error(e.status(), e.body_text()))?;
    loop {
        match form.next_field().await {
            Ok(Some(field)) => {
                if field.file_name().is_some() || field.name() == Some("image") {
                    return field.bytes().await.map_err(|e| error(e.status(), e.body_text()));
                }
            }
            Ok(None) => return Err(error(StatusCode::BAD_REQUEST, "multipart body has no image field")),
            Err(e) => return Err(error(e.status(), e.body_text())),
        }
    }
}

async fn screen(State(state): State<Arc<AppState>>, Query(query): Query<ScreenQuery>, req: Request) -> Response {
    let Some(screener) = state.screener() else {
        return not_ready();
    };
    let eye = match query.eye.as_deref().map(str::parse::<EyeChoice>).transpose() {
        Ok(e) => e.unwrap_or_default(),
        Err(msg) => return error(StatusCode::BAD_REQUEST, msg),
    };
    let bytes = match upload_bytes(req).await {
        Ok(b) => b,
        Err(resp) => return resp,
    };
    if let Some(dir) = &state.retain_uploads {
        let path = dir.join(sha256_hex(&bytes));
        if let Err(e) = tokio::fs::write(&path, &bytes).await {
            log::error!("retaining upload at {}: {e}", path.display());
        }
    }
    let result = tokio::task::spawn_blocking(move || screener.screen(&bytes, eye)).await;
    match result {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(ScreenError::Undecodable(m))) => error(StatusCode::BAD_REQUEST, format!("undecodable image: {m}")),
        Ok(Err(ScreenError::Internal(m))) => {
            log::error!("screening failed: {m}");
            error(StatusCode::INTERNAL_SERVER_ERROR, m)
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("screening task failed: {e}")),
    }
}

/// Binds `addr`, then loads the bundle in the background while already
/// answering requests. Returns when ctrl-c is received and in-flight requests
/// have finished.
pub async fn serve(
    addr: &str,
    max_upload_bytes: usize,
    retain_uploads: Option<PathBuf>,
    load: impl FnOnce() -> anyhow::Result<Screener> + Send + 'static,
) -> anyhow::Result<()> {
    if let Some(dir) = &retain_uploads {
        std::fs::create_dir_all(dir)?;
    }
    let state = AppState::new(retain_uploads);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| anyhow::anyhow!("binding {addr}: {e}"))?;
    log::info!("listening on {}", listener.local_addr()?);

    let loader = state.clone();
    let loading = tokio::task::spawn_blocking(move || {
        let screener = load()?;
        log::info!("model bundle {} ready", screener.version);
        loader.install(screener);
        anyhow::Ok(())
    });

    let app = router(state, max_upload_bytes);
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
                log::info!("shutting down");
            })
            .await
    });
    if let Err(e) = loading.await? {
        server.abort();
        return Err(e.context("loading the model bundle"));
    }
    server.await??;
    Ok(())
}
