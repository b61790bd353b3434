//! HTTP session API for semi-automatic 3D box annotation.
//!
//! A session holds one RGB-D frame. Each 2D box drawn on the frame seeds a
//! frustum task whose recursion is advanced either by human labels on the
//! served pseudo-views or by a detector. The service only sequences calls
//! into `rcv_core`; all geometry comes from there.
//!
//! Writes to one frustum are serialized: a request that finds the frustum
//! busy gets 409 and should retry. Reads go through snapshots that are
//! refreshed after every step.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rcv_core::crossview::CrossViewError;
use rcv_core::detect::{ClassTable, Detector, DetectorNoise, ExternalConfig, ExternalDetector, OracleDetector};
use rcv_core::geometry::{CameraIntrinsics, Detection2D, Rect, Vec3};
use rcv_core::io::{self, BoxJson, Manifest};
use rcv_core::recursion::{drive, Branch, BranchStatus, FrameData, RecursionConfig, RecursionError, StopReason};
use rcv_core::synthscene::class_table_for;
use rcv_core::views::{coarse_box, extract_frustum, PseudoView, ViewError};

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Exported records go to `data_dir/record_<k>`.
    pub data_dir: PathBuf,
    pub recursion: RecursionConfig,
    /// Noise for the oracle used by `auto`.
    pub oracle_noise: DetectorNoise,
    /// Detector for `auto` requests asking for `external`.
    pub external: Option<ExternalConfig>,
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{message}")]
    Unprocessable { message: String, hint: Option<String> },
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn unprocessable(message: impl Into<String>, hint: Option<&str>) -> Self {
        ApiError::Unprocessable {
            message: message.into(),
            hint: hint.map(str::to_string),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    hint: Option<String>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let message = self.to_string();
        let (status, code, hint) = match self {
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found", None),
            ApiError::Conflict(_) => (StatusCode::CONFLICT, "conflict", None),
            ApiError::Unprocessable { hint, .. } => (StatusCode::UNPROCESSABLE_ENTITY, "unprocessable", hint),
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", None),
        };
        let body = ErrorBody {
            error: code,
            message,
            hint,
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Session {
    id: String,
    frame: FrameData,
    image_png: Vec<u8>,
    classes: Option<ClassTable>,
    frustums: RwLock<Vec<Arc<FrustumTask>>>,
}

struct Work {
    branch: Branch,
    views: Option<(PseudoView, PseudoView)>,
}

/// What readers see of a frustum between steps.
#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub frustum_id: String,
    pub class: String,
    pub status: BranchStatus,
    /// Step awaiting labels, or the step the branch stopped at.
    pub step: usize,
    #[serde(rename = "box")]
    pub bbox: Option<BoxJson>,
    pub stop_reason: Option<StopReason>,
    /// Views for the pending step; absent once finished.
    pub pseudo_views: Option<Vec<ViewDescriptor>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewDescriptor {
    pub kind: String,
    pub step: usize,
    pub url: String,
    pub width: u32,
    pub height: u32,
    /// Pixels per meter.
    pub scale: f64,
    pub offset_u: f64,
    pub offset_v: f64,
}

/// Encoded views by (step, kind); older steps stay addressable.
type PngCache = HashMap<(usize, &'static str), Arc<Vec<u8>>>;

struct FrustumTask {
    id: String,
    session: Arc<Session>,
    work: Mutex<Work>,
    snapshot: RwLock<Snapshot>,
    pngs: RwLock<PngCache>,
}

pub struct AppState {
    cfg: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    frustums: RwLock<HashMap<String, Arc<FrustumTask>>>,
    next_id: AtomicU64,
    external: OnceLock<Result<Arc<ExternalDetector>, String>>,
    export_lock: Mutex<()>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            cfg,
            sessions: RwLock::default(),
            frustums: RwLock::default(),
            next_id: AtomicU64::new(1),
            external: OnceLock::new(),
            export_lock: Mutex::new(()),
        })
    }

    fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("session {id}")))
    }

    fn frustum(&self, id: &str) -> ApiResult<Arc<FrustumTask>> {
        self.frustums
            .read()
            .expect("frustum table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("frustum {id}")))
    }

    fn external_detector(&self) -> ApiResult<Arc<ExternalDetector>> {
        let Some(cfg) = &self.cfg.external else {
            return Err(ApiError::unprocessable("no external detector is configured", None));
        };
        self.external
            .get_or_init(|| ExternalDetector::spawn(cfg).map(Arc::new).map_err(|e| e.to_string()))
            .clone()
            .map_err(|e| ApiError::unprocessable(format!("external detector unavailable: {e}"), None))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info))
        .route("/sessions/{id}/image", get(session_image))
        .route("/sessions/{id}/frustums", post(create_frustum))
        .route("/sessions/{id}/boxes", get(session_boxes))
        .route("/sessions/{id}/export", post(export_session))
        .route("/frustums/{id}", get(frustum_info))
        .route("/frustums/{id}/labels", post(submit_labels))
        .route("/frustums/{id}/auto", post(run_auto))
        .route("/frustums/{id}/views/{step}/{file}", get(view_png))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, cfg: ServiceConfig) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::new(cfg))).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum ManifestRef {
    Path(PathBuf),
    Inline(Manifest),
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub manifest: ManifestRef,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub intrinsics: CameraIntrinsics,
    pub image_url: String,
    pub frustums: Vec<String>,
}

fn session_info_of(s: &Session) -> SessionInfo {
    SessionInfo {
        session_id: s.id.clone(),
        intrinsics: s.frame.intrinsics,
        image_url: format!("/sessions/{}/image", s.id),
        frustums: s.frustums.read().expect("poisoned").iter().map(|f| f.id.clone()).collect(),
    }
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionInfo>)> {
    let id = state.fresh_id("s");
    let session = blocking(move || {
        let loaded = match &req.manifest {
            ManifestRef::Path(p) => io::load_frame(p),
            ManifestRef::Inline(m) => io::load_manifest(m, Path::new(".")),
        }
        .map_err(|e| ApiError::unprocessable(format!("cannot load frame: {e}"), None))?;
        Ok(Session {
            id,
            image_png: io::png_bytes(&loaded.frame.image),
            classes: loaded.gt_boxes.as_deref().map(class_table_for),
            frame: loaded.frame,
            frustums: RwLock::default(),
        })
    })
    .await?;
    let session = Arc::new(session);
    let info = session_info_of(&session);
    state
        .sessions
        .write()
        .expect("session table poisoned")
        .insert(session.id.clone(), session);
    Ok((StatusCode::CREATED, Json(info)))
}

async fn session_info(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionInfo>> {
    let session = state.session(&id)?;
    Ok(Json(session_info_of(&session)))
}

async fn session_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    Ok(png(state.session(&id)?.image_png.clone()))
}

#[derive(Debug, Deserialize)]
pub struct CreateFrustum {
    pub class: String,
    /// Image pixels, `[u0, v0, u1, v1]`.
    pub rect: [f64; 4],
    /// Seed score; a human box defaults to 1.
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Serialize)]
pub struct FrustumCreated {
    pub frustum_id: String,
    pub points: usize,
    pub pseudo_views: Vec<ViewDescriptor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse_box: Option<BoxJson>,
}

fn detection(class: &str, score: f64, r: [f64; 4]) -> ApiResult<Detection2D> {
    let rect = Rect::new(r[0], r[1], r[2], r[3])
        .map_err(|e| ApiError::unprocessable(e.to_string(), Some("rects are [u0, v0, u1, v1] with u0 < u1 and v0 < v1")))?;
    Detection2D::new(class, score, rect).map_err(|e| ApiError::unprocessable(e.to_string(), None))
}

async fn create_frustum(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<CreateFrustum>,
) -> ApiResult<(StatusCode, Json<FrustumCreated>)> {
    let session = state.session(&id)?;
    let seed = detection(&req.class, req.score, req.rect)?;
    let fid = state.fresh_id("f");
    let st = state.clone();
    let (task, created) = blocking(move || {
        let frame = &session.frame;
        let indices = extract_frustum(&frame.cloud, &frame.intrinsics, &seed)
            .map_err(|e| ApiError::unprocessable(e.to_string(), Some("the rect must cover points of the cloud")))?;
        if indices.is_empty() {
            return Err(ApiError::unprocessable(
                "no points fall inside the rect",
                Some("the rect must cover points of the cloud"),
            ));
        }
        let branch = Branch::new(&seed, indices);
        let coarse_box = st.cfg.recursion.emit_coarse_box.then(|| {
            let pts: Vec<Vec3> = branch.state.indices.iter().map(|&i| frame.cloud.positions()[i]).collect();
            let mut b = coarse_box(&pts, &branch.state.frame);
            b.class_label = seed.class_label.clone();
            b.score = seed.score;
            BoxJson::from(&b)
        });
        let points = branch.state.indices.len();
        let task = FrustumTask {
            id: fid,
            session: session.clone(),
            work: Mutex::new(Work { branch, views: None }),
            snapshot: RwLock::new(Snapshot {
                frustum_id: String::new(),
                class: seed.class_label.clone(),
                status: BranchStatus::AwaitingLabels,
                step: 0,
                bbox: None,
                stop_reason: None,
                pseudo_views: None,
            }),
            pngs: RwLock::default(),
        };
        {
            let mut work = task.work.lock().expect("fresh lock");
            refresh(&task, &mut work, &st.cfg.recursion)?;
        }
        let snap = task.snapshot.read().expect("poisoned").clone();
        let created = FrustumCreated {
            frustum_id: task.id.clone(),
            points,
            pseudo_views: snap.pseudo_views.unwrap_or_default(),
            coarse_box,
        };
        Ok((Arc::new(task), created))
    })
    .await?;
    task.session.frustums.write().expect("poisoned").push(task.clone());
    state
        .frustums
        .write()
        .expect("frustum table poisoned")
        .insert(task.id.clone(), task);
    Ok((StatusCode::CREATED, Json(created)))
}

/// Renders the pending step's views (if any) and republishes the snapshot.
fn refresh(task: &FrustumTask, work: &mut Work, cfg: &RecursionConfig) -> ApiResult<()> {
    work.views = None;
    if !work.branch.is_finished() {
        match work.branch.views(&task.session.frame.cloud, &cfg.render) {
            Ok(v) => work.views = Some(v),
            Err(e) => {
                log::info!("frustum {} cannot render step {}: {e}", task.id, work.branch.state.step);
                work.branch.miss(cfg.on_detector_miss);
            }
        }
    }
    let step = work.branch.state.step;
    let descriptors = work.views.as_ref().map(|(front, side)| {
        let mut pngs = task.pngs.write().expect("poisoned");
        [front, side]
            .into_iter()
            .map(|v| {
                let kind = v.kind.as_str();
                pngs.entry((step, kind)).or_insert_with(|| Arc::new(io::png_bytes(&v.image)));
                ViewDescriptor {
                    kind: kind.to_string(),
                    step,
                    url: format!("/frustums/{}/views/{step}/{kind}.png", task.id),
                    width: v.width(),
                    height: v.height(),
                    scale: v.scale,
                    offset_u: v.offset_u,
                    offset_v: v.offset_v,
                }
            })
            .collect()
    });
    let mut snap = task.snapshot.write().expect("poisoned");
    snap.frustum_id = task.id.clone();
    snap.status = work.branch.status();
    snap.step = step;
    snap.bbox = work.branch.current_box().map(BoxJson::from);
    snap.stop_reason = work.branch.stop_reason();
    snap.pseudo_views = descriptors;
    Ok(())
}

fn lock_for_write(task: &FrustumTask) -> ApiResult<std::sync::MutexGuard<'_, Work>> {
    let work = match task.work.try_lock() {
        Ok(w) => w,
        Err(std::sync::TryLockError::WouldBlock) => {
            return Err(ApiError::Conflict(format!("frustum {} is busy; retry", task.id)))
        }
        Err(std::sync::TryLockError::Poisoned(_)) => {
            return Err(ApiError::Internal(format!("frustum {} is in a broken state", task.id)))
        }
    };
    if work.branch.is_finished() {
        return Err(ApiError::Conflict(format!(
            "frustum {} already finished ({:?}); seed a new frustum to start over",
            task.id,
            work.branch.status()
        )));
    }
    Ok(work)
}

/// Response to a step: the latest box, then either the next views or the end.
#[derive(Debug, Serialize)]
pub struct StepResponse {
    #[serde(flatten)]
    pub snapshot: Snapshot,
    pub converged: bool,
}

fn step_response(task: &FrustumTask) -> StepResponse {
    let snapshot = task.snapshot.read().expect("poisoned").clone();
    StepResponse {
        converged: snapshot.status == BranchStatus::Converged,
        snapshot,
    }
}

#[derive(Debug, Deserialize)]
pub struct Labels {
    /// Front pseudo-view pixels of the pending step.
    pub front_rect: [f64; 4],
    /// Side pseudo-view pixels of the pending step.
    pub side_rect: [f64; 4],
}

const SHARED_V_HINT: &str = "both views share the vertical axis: the front and side rects must overlap in v";

async fn submit_labels(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<Labels>,
) -> ApiResult<Json<StepResponse>> {
    let task = state.frustum(&id)?;
    blocking(move || {
        let mut work = lock_for_write(&task)?;
        let (class, score) = (work.branch.class_label.clone(), work.branch.score);
        let df = detection(&class, score, req.front_rect)?;
        let ds = detection(&class, score, req.side_rect)?;
        let work = &mut *work;
        let (front, side) = work.views.as_ref().expect("unfinished branches have views");
        let cfg = &state.cfg.recursion;
        match work.branch.apply(&task.session.frame.cloud, front, side, &df, &ds, cfg) {
            Ok(_) => {}
            Err(RecursionError::CrossView(e @ CrossViewError::InconsistentViews { .. })) => {
                return Err(ApiError::unprocessable(e.to_string(), Some(SHARED_V_HINT)))
            }
            Err(RecursionError::View(e @ (ViewError::EmptyAfterPrune | ViewError::EmptySubset))) => {
                return Err(ApiError::unprocessable(
                    e.to_string(),
                    Some("the rects must enclose points drawn in both views"),
                ))
            }
            Err(RecursionError::Finished) => return Err(ApiError::Conflict(format!("frustum {} already finished", task.id))),
            Err(e) => return Err(ApiError::unprocessable(e.to_string(), None)),
        }
        refresh(&task, work, cfg)?;
        Ok(Json(step_response(&task)))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorChoice {
    #[default]
    Oracle,
    External,
}

#[derive(Debug, Default, Deserialize)]
pub struct AutoRequest {
    #[serde(default)]
    pub detector: DetectorChoice,
}

async fn run_auto(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Option<Json<AutoRequest>>,
) -> ApiResult<Json<StepResponse>> {
    let task = state.frustum(&id)?;
    let req = body.map(|Json(b)| b).unwrap_or_default();
    blocking(move || {
        let detector: Box<dyn Detector> = match req.detector {
            DetectorChoice::Oracle => {
                let session = &task.session;
                let (Some(classes), Some(_)) = (&session.classes, session.frame.cloud.instance_ids()) else {
                    return Err(ApiError::unprocessable(
                        "the oracle detector needs ground-truth boxes and per-point instance ids",
                        Some("load a synthetic scene manifest or request the external detector"),
                    ));
                };
                Box::new(OracleDetector::new(classes.clone(), state.cfg.oracle_noise))
            }
            DetectorChoice::External => Box::new(state.external_detector()?),
        };
        let mut work = lock_for_write(&task)?;
        drive(&mut work.branch, &task.session.frame.cloud, detector.as_ref(), &state.cfg.recursion);
        refresh(&task, &mut work, &state.cfg.recursion)?;
        Ok(Json(step_response(&task)))
    })
    .await
}

async fn frustum_info(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Snapshot>> {
    let task = state.frustum(&id)?;
    let snap = task.snapshot.read().expect("poisoned").clone();
    Ok(Json(snap))
}

async fn view_png(
    State(state): State<Arc<AppState>>,
    UrlPath((id, step, file)): UrlPath<(String, usize, String)>,
) -> ApiResult<Response> {
    let task = state.frustum(&id)?;
    let kind = match file.as_str() {
        "front.png" => "front",
        "side.png" => "side",
        _ => return Err(ApiError::NotFound(format!("view {file}"))),
    };
    let bytes = task
        .pngs
        .read()
        .expect("poisoned")
        .get(&(step, kind))
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("{kind} view of step {step}")))?;
    Ok(png(bytes.as_ref().clone()))
}

fn current_boxes(session: &Session) -> ApiResult<Vec<BoxJson>> {
    Ok(session
        .frustums
        .read()
        .expect("poisoned")
        .iter()
        .filter_map(|f| f.snapshot.read().expect("poisoned").bbox.clone())
        .collect())
}

async fn session_boxes(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Vec<BoxJson>>> {
    let session = state.session(&id)?;
    Ok(Json(current_boxes(&session)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Exported {
    pub path: PathBuf,
    pub boxes: usize,
}

async fn export_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Exported>> {
    let session = state.session(&id)?;
    blocking(move || {
        let boxes = io::boxes_from_json(&current_boxes(&session)?).map_err(|e| ApiError::Internal(e.to_string()))?;
        let _guard = state.export_lock.lock().expect("export lock poisoned");
        let root = &state.cfg.data_dir;
        std::fs::create_dir_all(root).map_err(|e| ApiError::Internal(format!("{}: {e}", root.display())))?;
        let dir = (0u64..)
            .map(|k| root.join(format!("record_{k}")))
            .find(|d| !d.exists())
            .expect("unbounded search");
        io::write_record(&dir, &session.frame.image, &session.frame.cloud, &boxes)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        let path = std::path::absolute(&dir).unwrap_or(dir);
        Ok(Json(Exported {
            path,
            boxes: boxes.len(),
        }))
    })
    .await
}
