//! HTTP editing service under `/api/v1`.
//!
//! Each session owns its buffers behind an async mutex, so concurrent
//! requests against one session run in arrival order while different
//! sessions proceed in parallel. Idle sessions expire after the configured
//! TTL. Exports share one dataset root and take a global lock while the
//! top-level manifest is rewritten.

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scene_edit::assets::{AssetIndexEntry, AssetKind, AssetStore};
use scene_edit::dataset::{config_hash, export_sequence, ASSETS_DIR, MANIFEST_FILE};
use scene_edit::planner::{self, Camera};
use scene_edit::sampler::Sequence;
use scene_edit::scene::{validate_state, Annotation, NormBox, OpKind, Operation, OperationRecord};
use scene_edit::session::{create_session, Generator, NetworkStubGenerator, OracleGenerator, SessionBuffers, SessionError, SessionStart};
use scene_edit::{Canvas, Domain, ObjectInstance, OperationCommand, SceneError, SceneState};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex as AsyncMutex;

use crate::commands::GeneratorKind;

pub const API_PREFIX: &str = "/api/v1";

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub canvas: Canvas,
    pub max_history: usize,
    pub generator: GeneratorKind,
    pub seed: u64,
    pub ttl: Duration,
    pub export_dir: PathBuf,
}

/// JSON error body `{code, message}` with its status.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn unprocessable(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "UnknownSession", format!("no session `{id}`"))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl From<SceneError> for ApiError {
    fn from(e: SceneError) -> Self {
        ApiError::unprocessable(e.code(), e.to_string())
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::GeneratorFailure(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "InvalidRequest", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct SessionEntry {
    buffers: SessionBuffers,
    /// Hidden state after every round; `states.len() == round + 1`.
    states: Vec<SceneState>,
    seed: u64,
}

struct Slot {
    entry: Arc<AsyncMutex<SessionEntry>>,
    last_used: Instant,
}

struct Inner {
    assets: AssetStore,
    cfg: ServerConfig,
    generator: Box<dyn Generator>,
    sessions: Mutex<HashMap<String, Slot>>,
    next_id: AtomicU64,
    export_lock: AsyncMutex<()>,
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(assets: AssetStore, cfg: ServerConfig) -> Self {
        let generator: Box<dyn Generator> = match cfg.generator {
            GeneratorKind::Oracle => Box::new(OracleGenerator),
            GeneratorKind::NetworkStub => Box::new(NetworkStubGenerator::new(cfg.seed)),
        };
        AppState(Arc::new(Inner {
            assets,
            cfg,
            generator,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            export_lock: AsyncMutex::new(()),
        }))
    }

    pub fn session_count(&self) -> usize {
        self.0.sessions.lock().expect("session map poisoned").len()
    }

    /// Drops sessions idle for longer than the TTL as of `now`.
    pub fn sweep_expired(&self, now: Instant) -> usize {
        let ttl = self.0.cfg.ttl;
        let mut map = self.0.sessions.lock().expect("session map poisoned");
        let before = map.len();
        map.retain(|_, s| now.saturating_duration_since(s.last_used) <= ttl);
        before - map.len()
    }

    fn lookup(&self, id: &str) -> ApiResult<Arc<AsyncMutex<SessionEntry>>> {
        let now = Instant::now();
        self.sweep_expired(now);
        let mut map = self.0.sessions.lock().expect("session map poisoned");
        let slot = map.get_mut(id).ok_or_else(|| ApiError::unknown_session(id))?;
        slot.last_used = now;
        Ok(slot.entry.clone())
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/session", post(create))
        .route("/session/{id}", axum::routing::delete(delete_session))
        .route("/session/{id}/op", post(submit_op))
        .route("/session/{id}/frame/{file}", get(frame))
        .route("/session/{id}/history", get(history))
        .route("/session/{id}/export", post(export))
        .route("/assets", get(list_assets));
    Router::new().nest(API_PREFIX, api).with_state(state)
}

/// Binds `127.0.0.1:port` and serves until the process is stopped.
pub fn serve(port: u16, assets: AssetStore, cfg: ServerConfig) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
        let sweep_every = (cfg.ttl / 2).clamp(Duration::from_secs(1), Duration::from_secs(60));
        let state = AppState::new(assets, cfg);
        let sweeper = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(sweep_every);
            loop {
                tick.tick().await;
                sweeper.sweep_expired(Instant::now());
            }
        });
        eprintln!("listening on http://{}{API_PREFIX}", listener.local_addr()?);
        axum::serve(listener, router(state)).await
    })
}

fn frame_url(id: &str, round: usize) -> String {
    format!("{API_PREFIX}/session/{id}/frame/{round}.png")
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub center_px: Option<[f64; 2]>,
    pub depth: Option<f64>,
    pub position: Option<[f64; 3]>,
    pub rotation_deg: Option<[f64; 3]>,
    pub scale: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub asset_id: String,
    pub instance_id: Option<String>,
    pub init: Option<InitSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub background_id: Option<String>,
    pub objects: Vec<ObjectSpec>,
    pub canvas: Option<Canvas>,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct Created {
    session_id: String,
    frame_url: String,
    domain: Domain,
    annotations: Vec<Annotation>,
}

fn build_initial_state(req: &CreateSession, assets: &AssetStore, canvas: Canvas, seed: u64) -> ApiResult<SceneState> {
    let first = req
        .objects
        .first()
        .ok_or_else(|| ApiError::unprocessable("InvalidState", "a session needs at least one object"))?;
    let kind_of = |id: &str| {
        assets
            .get(id)
            .map(|a| a.kind)
            .ok_or_else(|| ApiError::from(SceneError::MissingAsset(id.to_string())))
    };
    let kind = kind_of(&first.asset_id)?;
    for o in &req.objects {
        if kind_of(&o.asset_id)? != kind {
            return Err(ApiError::unprocessable("InvalidState", "objects mix layer and box assets"));
        }
    }
    let domain = match kind {
        AssetKind::Layer2d => Domain::Real,
        AssetKind::Box3d => Domain::Syn,
    };
    let id_of = |i: usize, o: &ObjectSpec| o.instance_id.clone().unwrap_or_else(|| format!("inst_{i}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let state = match domain {
        Domain::Real => {
            let background_id = match &req.background_id {
                Some(b) => b.clone(),
                None => assets
                    .backgrounds()
                    .first()
                    .map(|b| b.id.clone())
                    .ok_or_else(|| ApiError::from(SceneError::MissingAsset("background".into())))?,
            };
            if !assets.get(&background_id).is_some_and(|b| b.is_background()) {
                return Err(SceneError::MissingAsset(background_id).into());
            }
            let objects = req
                .objects
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    let init = o.init.as_ref();
                    let center = init.and_then(|s| s.center_px).unwrap_or_else(|| {
                        [
                            rng.random_range(0.0..canvas.width as f64),
                            rng.random_range(0.0..canvas.height as f64),
                        ]
                    });
                    let depth = init.and_then(|s| s.depth).unwrap_or_else(|| rng.random_range(10.0..=200.0));
                    let scale = init.and_then(|s| s.scale).unwrap_or(1.0);
                    ObjectInstance::layer(id_of(i, o), o.asset_id.clone(), center, depth, scale)
                })
                .collect();
            SceneState {
                domain,
                background_id,
                canvas,
                objects,
                camera: None,
                rng_seed: seed,
            }
        }
        Domain::Syn => {
            let background_id = req.background_id.clone().unwrap_or_else(|| "ground".to_string());
            let with_init = req.objects.iter().filter(|o| o.init.is_some()).count();
            if with_init == 0 {
                let chosen: Vec<_> = req
                    .objects
                    .iter()
                    .map(|o| assets.get(&o.asset_id).expect("checked above"))
                    .collect();
                let mut s = planner::place_objects(&background_id, &chosen, canvas, Camera::default(), seed, &mut rng)?;
                for (i, (inst, o)) in s.objects.iter_mut().zip(&req.objects).enumerate() {
                    inst.instance_id = id_of(i, o);
                }
                s
            } else if with_init == req.objects.len() {
                let objects = req
                    .objects
                    .iter()
                    .enumerate()
                    .map(|(i, o)| {
                        let init = o.init.as_ref().expect("all have init");
                        let extent = assets.get(&o.asset_id).and_then(|a| a.extent).unwrap_or([1.0; 3]);
                        let rot = init.rotation_deg.unwrap_or([0.0; 3]);
                        let scale = init.scale.unwrap_or(1.0);
                        let [x, _, z] = init.position.unwrap_or([0.0; 3]);
                        // Boxes always rest on the ground; a supplied height is ignored.
                        let y = planner::grounded_height(extent, scale, rot);
                        ObjectInstance::cuboid(id_of(i, o), o.asset_id.clone(), [x, y, z], rot, scale)
                    })
                    .collect();
                SceneState {
                    domain,
                    background_id,
                    canvas,
                    objects,
                    camera: Some(Camera::default()),
                    rng_seed: seed,
                }
            } else {
                return Err(ApiError::unprocessable(
                    "InvalidState",
                    "give `init` for every box or for none of them",
                ));
            }
        }
    };
    if let Some(e) = validate_state(&state, assets).into_iter().next() {
        return Err(e.into());
    }
    Ok(state)
}

async fn create(State(app): State<AppState>, body: Result<Json<CreateSession>, JsonRejection>) -> ApiResult<(StatusCode, Json<Created>)> {
    let Json(req) = body?;
    let inner = app.0.clone();
    let canvas = req.canvas.unwrap_or(inner.cfg.canvas);
    if canvas.width == 0 || canvas.height == 0 {
        return Err(ApiError::unprocessable("InvalidState", "canvas must be non-empty"));
    }
    let n = req.n.unwrap_or(inner.cfg.max_history);
    let seed = req.seed.unwrap_or(inner.cfg.seed);
    let worker = inner.clone();
    let entry = blocking(move || -> ApiResult<SessionEntry> {
        let state = build_initial_state(&req, &worker.assets, canvas, seed)?;
        let buffers = create_session(SessionStart::State(state.clone()), &worker.assets, n)?;
        Ok(SessionEntry {
            buffers,
            states: vec![state],
            seed,
        })
    })
    .await??;

    let id = format!("s{:08}", inner.next_id.fetch_add(1, Ordering::Relaxed));
    let created = Created {
        session_id: id.clone(),
        frame_url: frame_url(&id, 0),
        domain: entry.states[0].domain,
        annotations: entry.buffers.frames()[0].annotations.clone(),
    };
    app.sweep_expired(Instant::now());
    inner.sessions.lock().expect("session map poisoned").insert(
        id,
        Slot {
            entry: Arc::new(AsyncMutex::new(entry)),
            last_used: Instant::now(),
        },
    );
    Ok((StatusCode::CREATED, Json(created)))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum OpValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpRequest {
    pub instance_id: String,
    pub kind: OpKind,
    pub value: OpValue,
    pub target_bbox: Option<[f64; 4]>,
}

#[derive(Debug, Serialize)]
struct OpResponse {
    round: usize,
    frame_url: String,
    annotations: Vec<Annotation>,
}

fn parse_operation(req: &OpRequest, domain: Domain) -> ApiResult<Operation> {
    let values = match &req.value {
        OpValue::Scalar(v) => vec![*v],
        OpValue::Vector(v) => v.clone(),
    };
    if req.kind == OpKind::T {
        let want = match domain {
            Domain::Real => 3,
            Domain::Syn => 2,
        };
        if values.len() != want {
            let shape = if want == 3 { "[dx, dy, dd]" } else { "[dx, dz]" };
            return Err(ApiError::unprocessable(
                "InvalidOperation",
                format!("T takes {shape} in the {domain} domain"),
            ));
        }
    }
    Operation::from_parts(req.kind, &values).map_err(|m| ApiError::unprocessable("InvalidOperation", m))
}

fn parse_bbox(b: Option<[f64; 4]>) -> ApiResult<Option<NormBox>> {
    let Some(b) = b else { return Ok(None) };
    let in_unit = b.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v));
    if !in_unit || b[0] > b[2] || b[1] > b[3] {
        return Err(ApiError::unprocessable(
            "InvalidOperation",
            "target_bbox must be [u0, v0, u1, v1] inside [0, 1] with u0 <= u1 and v0 <= v1",
        ));
    }
    Ok(Some(NormBox::from(b)))
}

async fn submit_op(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<OpRequest>, JsonRejection>,
) -> ApiResult<Json<OpResponse>> {
    let Json(req) = body?;
    let entry = app.lookup(&id)?.lock_owned().await;
    let domain = entry.states[0].domain;
    let op = parse_operation(&req, domain)?;
    let bbox = parse_bbox(req.target_bbox)?;
    let cmd = OperationCommand::new(req.instance_id, op);
    let inner = app.0.clone();
    let resp = blocking(move || -> ApiResult<OpResponse> {
        let mut entry = entry;
        let entry = &mut *entry;
        let seed = entry.seed.wrapping_add(entry.buffers.round() as u64 + 1);
        let obs = entry
            .buffers
            .submit_operation(&cmd, bbox, inner.generator.as_ref(), seed, &inner.assets)?;
        let annotations = obs.annotations.clone();
        let state = entry.buffers.state().expect("sessions start from a state").clone();
        entry.states.push(state);
        let round = entry.buffers.round();
        Ok(OpResponse {
            round,
            frame_url: frame_url(&id, round),
            annotations,
        })
    })
    .await??;
    Ok(Json(resp))
}

fn encode_png(img: &image::RgbaImage) -> ApiResult<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(buf.into_inner())
}

async fn frame(State(app): State<AppState>, UrlPath((id, file)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, "UnknownFrame", format!("no frame `{file}`"));
    let round: usize = file
        .strip_suffix(".png")
        .and_then(|r| r.parse().ok())
        .ok_or_else(not_found)?;
    let entry = app.lookup(&id)?;
    let img = {
        let entry = entry.lock().await;
        entry.buffers.frames().get(round).ok_or_else(not_found)?.image.clone()
    };
    let png = blocking(move || encode_png(&img)).await??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Serialize)]
struct HistoryResponse {
    session_id: String,
    round: usize,
    max_history: usize,
    rounds: Vec<OperationRecord>,
}

async fn history(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<HistoryResponse>> {
    let entry = app.lookup(&id)?;
    let entry = entry.lock().await;
    Ok(Json(HistoryResponse {
        session_id: id,
        round: entry.buffers.round(),
        max_history: entry.buffers.max_history(),
        rounds: entry.buffers.records().to_vec(),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRequest {
    pub out_name: String,
}

#[derive(Debug, Serialize)]
struct ExportResponse {
    manifest_path: String,
    annotations_path: String,
}

fn valid_out_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && name != ASSETS_DIR
        && name != MANIFEST_FILE
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

async fn export(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<ExportRequest>, JsonRejection>,
) -> ApiResult<Json<ExportResponse>> {
    let Json(req) = body?;
    if !valid_out_name(&req.out_name) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "InvalidRequest",
            "out_name must be a plain directory name",
        ));
    }
    let entry = app.lookup(&id)?;
    let (seq, max_history) = {
        let entry = entry.lock().await;
        let seq = Sequence {
            seed: entry.seed,
            states: entry.states.clone(),
            observations: entry.buffers.frames().to_vec(),
            records: entry.buffers.records().to_vec(),
            truncated: false,
        };
        (seq, entry.buffers.max_history())
    };
    let inner = app.0.clone();
    let hash = config_hash(&json!({
        "generator": format!("{:?}", inner.cfg.generator),
        "max_history": max_history,
        "seed": seq.seed,
        "session": id,
    }));
    let _guard = inner.export_lock.lock().await;
    let worker = inner.clone();
    let out_name = req.out_name;
    let annotations = blocking(move || -> ApiResult<PathBuf> {
        let root: &Path = &worker.cfg.export_dir;
        let assets_dir = root.join(ASSETS_DIR);
        if !assets_dir.exists() {
            worker
                .assets
                .write_dir(&assets_dir)
                .map_err(|e| ApiError::internal(e.to_string()))?;
        }
        export_sequence(&seq, root, &out_name, &hash, &worker.assets).map_err(|e| ApiError::internal(e.to_string()))
    })
    .await??;
    Ok(Json(ExportResponse {
        manifest_path: inner.cfg.export_dir.join(MANIFEST_FILE).display().to_string(),
        annotations_path: annotations.display().to_string(),
    }))
}

async fn delete_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<StatusCode> {
    let removed = app.0.sessions.lock().expect("session map poisoned").remove(&id);
    match removed {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::unknown_session(&id)),
    }
}

async fn list_assets(State(app): State<AppState>) -> Json<Vec<AssetIndexEntry>> {
    Json(app.0.assets.index())
}
