//! HTTP/JSON service over one review queue.
//!
//! Routes:
//!
//! - `GET  /api/queue` queue id and progress counts
//! - `GET  /api/items?state=&offset=&limit=` a page of items
//! - `GET  /api/items/{item_id}` one item
//! - `POST /api/items/{item_id}/decision` `{"action", "box"?}`, returns the updated item
//! - `GET  /api/images/{image_id}` raster bytes
//! - `POST /api/export` `{"force"}`, returns the export report
//!
//! Everything else is served from the UI directory when one is configured.
//! Decisions are appended to the queue's journal before they are
//! acknowledged, so a restarted service resumes exactly where it stopped.

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use boxforge_core::api::{
    ErrorBody, ExportRequest, ItemPage, ItemView, ItemsQuery, QueueOverview, DEFAULT_PAGE_LIMIT,
    MAX_PAGE_LIMIT,
};
use boxforge_core::review::{
    resolve_image, DecisionRequest, ExportReport, ReviewItem, ReviewSession,
};
use boxforge_core::Error;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub queue_path: PathBuf,
    /// Where `POST /api/export` writes. Clients cannot choose the location.
    pub export_root: PathBuf,
    /// Static files of the review UI.
    pub ui_dir: Option<PathBuf>,
}

pub struct AppState {
    session: Mutex<ReviewSession>,
    image_root: Option<PathBuf>,
    export_root: PathBuf,
    dims: Mutex<HashMap<String, Option<(u32, u32)>>>,
}

impl AppState {
    pub fn new(session: ReviewSession, export_root: PathBuf) -> Self {
        AppState {
            image_root: session.queue().image_root.clone(),
            session: Mutex::new(session),
            export_root,
            dims: Mutex::new(HashMap::new()),
        }
    }

    /// Opens the queue file and replays its journal.
    pub fn open(config: &ServerConfig) -> boxforge_core::Result<Self> {
        let session = ReviewSession::open(&config.queue_path)?;
        Ok(AppState::new(session, config.export_root.clone()))
    }

    fn session(&self) -> MutexGuard<'_, ReviewSession> {
        // A panic while holding the lock cannot leave the session half
        // updated: decide_at swaps the queue in only after the journal write.
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn view(&self, item: ReviewItem) -> ItemView {
        let dims = self.image_dims(&item.image_id);
        ItemView {
            item,
            image_width: dims.map(|d| d.0),
            image_height: dims.map(|d| d.1),
        }
    }

    fn image_dims(&self, image_id: &str) -> Option<(u32, u32)> {
        if let Some(d) = self
            .dims
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(image_id)
        {
            return *d;
        }
        let d = self
            .image_root
            .as_deref()
            .and_then(|root| resolve_image(root, image_id))
            .and_then(|p| image::image_dimensions(p).ok());
        self.dims
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(image_id.to_string(), d);
        d
    }
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: message.into(),
                pending: None,
            },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownItem(_) | Error::UnknownImage(_) => StatusCode::NOT_FOUND,
            Error::IncompleteReview { .. } => StatusCode::CONFLICT,
            Error::InvalidBox(_) | Error::DegenerateBox(_) | Error::InvalidArgument(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!("{e}");
        }
        let mut err = ApiError::new(status, e.to_string());
        if let Error::IncompleteReview { pending } = e {
            err.body.pending = Some(pending);
        }
        err
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(r.status(), r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        ApiError::new(r.status(), r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn queue_overview(State(state): State<Arc<AppState>>) -> Json<QueueOverview> {
    let session = state.session();
    let q = session.queue();
    Json(QueueOverview {
        queue_id: q.queue_id.clone(),
        source_iteration: q.source_iteration.clone(),
        summary: q.summary(),
    })
}

async fn list_items(
    State(state): State<Arc<AppState>>,
    query: Result<Query<ItemsQuery>, QueryRejection>,
) -> ApiResult<ItemPage> {
    let Query(query) = query?;
    let offset = query.offset.unwrap_or(0);
    let limit = query
        .limit
        .unwrap_or(DEFAULT_PAGE_LIMIT)
        .min(MAX_PAGE_LIMIT);
    let (total, page) = {
        let session = state.session();
        let matching = session
            .queue()
            .items
            .iter()
            .filter(|i| query.state.is_none_or(|s| i.state == s));
        let total = matching.clone().count();
        let page: Vec<ReviewItem> = matching.skip(offset).take(limit).cloned().collect();
        (total, page)
    };
    // Image headers are read outside the session lock.
    let items =
        tokio::task::spawn_blocking(move || page.into_iter().map(|i| state.view(i)).collect())
            .await
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(ItemPage {
        total,
        offset,
        items,
    }))
}

async fn get_item(
    State(state): State<Arc<AppState>>,
    UrlPath(item_id): UrlPath<String>,
) -> ApiResult<ItemView> {
    let item = state
        .session()
        .queue()
        .item(&item_id)
        .cloned()
        .ok_or(Error::UnknownItem(item_id))?;
    blocking(move || Ok(state.view(item))).await
}

async fn decide(
    State(state): State<Arc<AppState>>,
    UrlPath(item_id): UrlPath<String>,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> ApiResult<ItemView> {
    let Json(request) = body?;
    blocking(move || {
        let item = {
            let mut session = state.session();
            let proposed = session
                .queue()
                .item(&item_id)
                .map(|i| i.proposed)
                .ok_or_else(|| Error::UnknownItem(item_id.clone()))?;
            let decision = request.to_decision(&proposed)?;
            session.decide(&item_id, decision)?
        };
        tracing::debug!(item = %item.item_id, state = ?item.state, "decision");
        Ok(state.view(item))
    })
    .await
}

async fn export(
    State(state): State<Arc<AppState>>,
    body: Result<Json<ExportRequest>, JsonRejection>,
) -> ApiResult<ExportReport> {
    let Json(request) = body?;
    blocking(move || {
        let report = state.session().export(&state.export_root, request.force)?;
        tracing::info!(
            out = %report.out_root.display(),
            boxes = report.boxes_written,
            skipped = report.skipped_images.len(),
            "export"
        );
        Ok(report)
    })
    .await
}

async fn image(
    State(state): State<Arc<AppState>>,
    UrlPath(image_id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let path = state
        .image_root
        .as_deref()
        .and_then(|root| resolve_image(root, &image_id))
        .ok_or(Error::UnknownImage(image_id))?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("{}: {e}", path.display()),
        )
    })?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, Error> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => Ok(Json(r?)),
        Err(e) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            e.to_string(),
        )),
    }
}

fn content_type(path: &Path) -> &'static str {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "jpg" | "jpeg" => "image/jpeg",
        "png" => "image/png",
        _ => "application/octet-stream",
    }
}

const PLACEHOLDER: &str = "<!doctype html><title>boxforge review</title>\
<p>No review UI is installed. The JSON API is under <code>/api</code>.</p>";

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/queue", get(queue_overview))
        .route("/items", get(list_items))
        .route("/items/{item_id}", get(get_item))
        .route("/items/{item_id}/decision", post(decide))
        .route("/images/{*image_id}", get(image))
        .route("/export", post(export))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no such route") });
    let app = Router::new().nest("/api", api).with_state(state);
    match ui_dir {
        Some(dir) => {
            app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true))
        }
        None => app.route("/", get(|| async { Html(PLACEHOLDER) })),
    }
}

/// Serves `app` until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        tracing::info!("review service listening on http://{addr}");
    }
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
}
