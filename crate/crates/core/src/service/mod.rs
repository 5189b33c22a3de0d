//! HTTP API over one active backend and one artifact store.
//!
//! Synchronous endpoints (global directions, mapper application) run the
//! math on the blocking pool; optimization, mapper training and statistics
//! precomputation are jobs on a bounded worker pool.

mod error;
mod jobs;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use self::error::{ApiError, ApiResult, ErrorBody};
pub use self::jobs::{JobHandle, JobOutcome, JobQueue};

use crate::directions::{
    edit_global, precompute_channel_stats, ChannelStats, PromptSpec, Sparsity, StatsParams,
    TemplateBank, DEFAULT_PAIR_COUNT, DEFAULT_PERTURB_ALPHA, DEFAULT_SAMPLE_COUNT,
};
use crate::error::{EditError, Result};
use crate::gateway::{BackendBundle, ImageTensor};
use crate::guidance::TextGuidance;
use crate::latent::{LayerGroup, StyleCode, WPlusCode};
use crate::mapper::{
    apply_mapper, load_checkpoint, sample_training_latents, save_checkpoint, train_mapper_with,
    MapperConfig,
};
use crate::optimizer::{optimize_latent_with_progress, OptimizeConfig};
use crate::store::{
    content_fingerprint, ArtifactKey, ArtifactKind, ArtifactStore, JobKind, JobState,
};

/// Environment variable that overrides the backend config path.
pub const CONFIG_ENV: &str = "STYLE_TOOLKIT_CONFIG";

/// Largest accepted upload and largest inline base64 payload.
pub const DEFAULT_MAX_UPLOAD: usize = 4 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub store_root: PathBuf,
    pub workers: usize,
    pub max_upload_bytes: usize,
    pub bank: TemplateBank,
}

impl ServiceOptions {
    pub fn new(store_root: impl Into<PathBuf>) -> Self {
        ServiceOptions {
            store_root: store_root.into(),
            workers: 1,
            max_upload_bytes: DEFAULT_MAX_UPLOAD,
            bank: TemplateBank::imagenet(),
        }
    }
}

struct Session {
    w: WPlusCode,
    s: StyleCode,
}

struct Inner {
    backend: Arc<BackendBundle>,
    store: Arc<ArtifactStore>,
    jobs: JobQueue,
    bank: TemplateBank,
    max_upload: usize,
    sessions: Mutex<HashMap<String, Arc<Session>>>,
    stats: Mutex<HashMap<String, Arc<ChannelStats>>>,
}

/// Shared handler state.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(backend: BackendBundle, options: ServiceOptions) -> Result<Self> {
        let store = Arc::new(ArtifactStore::open(&options.store_root)?);
        let jobs = JobQueue::start(store.clone(), options.workers)?;
        Ok(AppState(Arc::new(Inner {
            backend: Arc::new(backend),
            store,
            jobs,
            bank: options.bank,
            max_upload: options.max_upload_bytes,
            sessions: Mutex::new(HashMap::new()),
            stats: Mutex::new(HashMap::new()),
        })))
    }

    pub fn backend(&self) -> &BackendBundle {
        &self.0.backend
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.0.store
    }

    pub fn job(&self, id: &str) -> Option<crate::store::JobRecord> {
        self.0.jobs.get(id)
    }

    /// Stores an image, inverts it and registers the session under the
    /// PNG's content fingerprint.
    pub fn ingest_png(&self, png: &[u8]) -> Result<String> {
        let img = ImageTensor::from_png(png)?;
        if img.shape() != self.backend().image_shape() {
            return Err(EditError::InvalidArgument(format!(
                "image is {}x{}, backend expects {}x{}",
                img.shape().height,
                img.shape().width,
                self.backend().image_shape().height,
                self.backend().image_shape().width
            )));
        }
        let w = self.backend().invert_image(&img)?;
        let id = content_fingerprint(png);
        self.store()
            .put(&ArtifactKey::new(ArtifactKind::Image, &id, "upload"), png)?;
        self.register_session(&id, w)?;
        Ok(id)
    }

    fn register_session(&self, id: &str, w: WPlusCode) -> Result<Arc<Session>> {
        let s = self.backend().wplus_to_style(&w)?;
        let session = Arc::new(Session { w, s });
        self.0
            .sessions
            .lock()
            .expect("sessions poisoned")
            .insert(id.to_string(), session.clone());
        Ok(session)
    }

    fn session(&self, id: &str) -> Result<Arc<Session>> {
        if let Some(s) = self.0.sessions.lock().expect("sessions poisoned").get(id) {
            return Ok(s.clone());
        }
        // Images stored by an earlier process are re-inverted on demand.
        let png = self
            .store()
            .get(ArtifactKind::Image, id)
            .map_err(|_| EditError::NotFound(format!("unknown image_id {id}")))?;
        let w = self.backend().invert_image(&ImageTensor::from_png(&png)?)?;
        self.register_session(id, w)
    }

    /// The newest statistics computed for the active backend.
    pub fn active_stats(&self) -> Result<Option<Arc<ChannelStats>>> {
        let Some(record) = self
            .store()
            .find_label(ArtifactKind::Stats, self.backend().fingerprint())
        else {
            return Ok(None);
        };
        let fp = record.key.fingerprint;
        if let Some(s) = self.0.stats.lock().expect("stats poisoned").get(&fp) {
            return Ok(Some(s.clone()));
        }
        let stats = Arc::new(ChannelStats::decode(
            &self.store().get(ArtifactKind::Stats, &fp)?,
        )?);
        stats.check_backend(self.backend())?;
        self.0
            .stats
            .lock()
            .expect("stats poisoned")
            .insert(fp, stats.clone());
        Ok(Some(stats))
    }
}

pub fn router(state: AppState) -> Router {
    let upload_limit = state.0.max_upload + 64 * 1024;
    Router::new()
        .route("/health", get(health))
        .route(
            "/images",
            post(upload_image).layer(DefaultBodyLimit::max(upload_limit)),
        )
        .route("/manipulate/global", post(manipulate_global))
        .route("/manipulate/optimize", post(manipulate_optimize))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/result", get(get_job_result))
        .route("/mappers", post(train_mapper_job).get(list_mappers))
        .route("/mappers/{name}/apply", post(apply_named_mapper))
        .route("/directions/precompute", post(precompute))
        .route("/artifacts", get(list_artifacts))
        .route("/artifacts/{kind}/{fingerprint}", get(fetch_artifact))
        .with_state(state)
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(state: AppState, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn png_base64(img: &ImageTensor) -> Result<String> {
    Ok(BASE64.encode(img.to_png()?))
}

async fn health(State(state): State<AppState>) -> ApiResult<Json<serde_json::Value>> {
    let b = state.backend();
    let stats = state.active_stats()?;
    Ok(Json(json!({
        "status": "ok",
        "backend": { "kind": b.kind().as_str(), "fingerprint": b.fingerprint() },
        "geometry": b.geometry(),
        "image_shape": b.image_shape(),
        "embed_dim": b.embed_dim(),
        "has_identity": b.has_identity(),
        "has_inverter": b.has_inverter(),
        "stats": {
            "available": stats.is_some(),
            "key": stats.map(|s| s.key()),
        },
    })))
}

async fn upload_image(
    State(state): State<AppState>,
    mut multipart: Multipart,
) -> ApiResult<Json<serde_json::Value>> {
    let mut data = None;
    loop {
        let field = multipart.next_field().await.map_err(multipart_error)?;
        let Some(field) = field else { break };
        let bytes = field.bytes().await.map_err(multipart_error)?;
        if data.is_none() {
            data = Some(bytes);
        }
    }
    let data = data.ok_or_else(|| ApiError::bad_request("multipart body has no image field"))?;
    if data.len() > state.0.max_upload {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "too_large",
            format!(
                "upload of {} bytes exceeds {}",
                data.len(),
                state.0.max_upload
            ),
        ));
    }
    if !state.backend().has_inverter() {
        return Err(EditError::InverterUnavailable.into());
    }
    let id = blocking(move || Ok(state.ingest_png(&data)?)).await?;
    Ok(Json(json!({ "image_id": id })))
}

fn multipart_error(e: axum::extract::multipart::MultipartError) -> ApiError {
    if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "too_large", e.body_text())
    } else {
        ApiError::bad_request(e.body_text())
    }
}

#[derive(Debug, Deserialize)]
pub struct GlobalRequest {
    pub image_id: String,
    pub target: String,
    pub neutral: String,
    pub alpha: f64,
    pub beta: Option<f64>,
    pub k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GlobalResponse {
    /// Base64 PNG.
    pub image: String,
    pub active_channels: usize,
    pub beta_used: f64,
    pub saturated: bool,
}

async fn manipulate_global(
    State(state): State<AppState>,
    Json(req): Json<GlobalRequest>,
) -> ApiResult<Json<GlobalResponse>> {
    let sparsity = match (req.beta, req.k) {
        (Some(beta), None) => Sparsity::Beta(beta),
        (None, Some(k)) => Sparsity::K(k),
        _ => return Err(ApiError::bad_request("give exactly one of beta or k")),
    };
    blocking(move || {
        let session = state.session(&req.image_id)?;
        let stats = state.active_stats()?.ok_or_else(ApiError::stats_missing)?;
        let spec = PromptSpec::new(req.target, req.neutral)?;
        let edit = edit_global(
            state.backend(),
            &stats,
            &session.s,
            &spec,
            &state.0.bank,
            sparsity,
            req.alpha,
        )?;
        Ok(Json(GlobalResponse {
            image: png_base64(&edit.image)?,
            active_channels: edit.direction.active_count(),
            beta_used: edit.beta_used,
            saturated: edit.saturated,
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct OptimizeRequest {
    pub image_id: String,
    pub prompt: String,
    pub lambda_l2: Option<f64>,
    pub lambda_id: Option<f64>,
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
}

fn accepted(id: String) -> Response {
    (StatusCode::ACCEPTED, Json(json!({ "job_id": id }))).into_response()
}

async fn manipulate_optimize(
    State(state): State<AppState>,
    Json(req): Json<OptimizeRequest>,
) -> ApiResult<Response> {
    let d = OptimizeConfig::default();
    let cfg = OptimizeConfig {
        lambda_l2: req.lambda_l2.unwrap_or(d.lambda_l2),
        lambda_id: req.lambda_id.unwrap_or(d.lambda_id),
        steps: req.steps.unwrap_or(d.steps),
        learning_rate: req.learning_rate.unwrap_or(d.learning_rate),
        seed: req.seed.unwrap_or(d.seed),
        ..d
    };
    cfg.validate()?;
    if cfg.lambda_id > 0.0 && !state.backend().has_identity() {
        return Err(EditError::IdentityUnavailable.into());
    }
    let session = {
        let state = state.clone();
        let id = req.image_id.clone();
        blocking(move || Ok(state.session(&id)?)).await?
    };
    let guidance = TextGuidance::new(state.backend(), &req.prompt)?;
    let worker_state = state.clone();
    let id = state.0.jobs.submit(JobKind::Optimize, None, move |job| {
        let state = worker_state;
        let backend = state.backend();
        let trace =
            optimize_latent_with_progress(backend, &guidance, &session.w, &cfg, |done, total| {
                job.progress(done as f64 / total as f64)
            })?;
        let image = backend.generate_from_wplus(&trace.final_code)?;
        let png = image.to_png()?;
        let image_id = content_fingerprint(&png);
        state.store().put(
            &ArtifactKey::new(ArtifactKind::Image, &image_id, "optimize"),
            &png,
        )?;
        state.register_session(&image_id, trace.final_code.clone())?;
        let csv = trace.to_csv()?;
        let trace_key = ArtifactKey::new(
            ArtifactKind::Trace,
            content_fingerprint(csv.as_bytes()),
            req.prompt.clone(),
        );
        state.store().put(&trace_key, csv.as_bytes())?;
        Ok(JobOutcome {
            output: Some(json!({
                "image_id": image_id,
                "trace": trace_key.fingerprint,
                "final_terms": trace.final_terms,
            })),
            result: Some(trace_key),
        })
    })?;
    Ok(accepted(id))
}

async fn get_job(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<crate::store::JobRecord>> {
    state
        .job(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))
}

async fn get_job_result(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let job = state
        .job(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown job {id}")))?;
    match job.state {
        JobState::Done => {}
        JobState::Failed => {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "job_failed",
                job.error.unwrap_or_default(),
            ))
        }
        _ => {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "job_pending",
                format!("job {id} is still {:?}", job.state),
            ))
        }
    }
    let mut output = job.output.unwrap_or_else(|| json!({}));
    if let Some(image_id) = output
        .get("image_id")
        .and_then(|v| v.as_str())
        .map(str::to_string)
    {
        let png = state.store().get(ArtifactKind::Image, &image_id)?;
        output["image"] = json!(BASE64.encode(png));
    }
    Ok(Json(output))
}

#[derive(Debug, Deserialize)]
pub struct TrainRequest {
    pub name: String,
    pub prompt: String,
    pub steps: Option<usize>,
    pub latent_count: Option<usize>,
    pub seed: Option<u64>,
    pub branches: Option<Vec<LayerGroup>>,
    pub hidden_dim: Option<usize>,
    pub lambda_l2: Option<f64>,
    pub lambda_id: Option<f64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
}

/// Training latents drawn when a request does not say.
const DEFAULT_TRAIN_LATENTS: usize = 64;

async fn train_mapper_job(
    State(state): State<AppState>,
    Json(req): Json<TrainRequest>,
) -> ApiResult<Response> {
    if req.name.is_empty()
        || !req
            .name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_'))
    {
        return Err(ApiError::bad_request(format!(
            "invalid mapper name {:?}",
            req.name
        )));
    }
    let d = MapperConfig::default();
    let cfg = MapperConfig {
        enabled_branches: req.branches.unwrap_or(d.enabled_branches.clone()),
        hidden_dim: req.hidden_dim.unwrap_or(d.hidden_dim),
        lambda_l2: req.lambda_l2.unwrap_or(d.lambda_l2),
        lambda_id: req.lambda_id.unwrap_or(d.lambda_id),
        steps: req.steps.unwrap_or(d.steps),
        batch_size: req.batch_size.unwrap_or(d.batch_size),
        learning_rate: req.learning_rate.unwrap_or(d.learning_rate),
        seed: req.seed.unwrap_or(d.seed),
        ..d
    };
    cfg.validate()?;
    if cfg.lambda_id > 0.0 && !state.backend().has_identity() {
        return Err(EditError::IdentityUnavailable.into());
    }
    let guidance = TextGuidance::new(state.backend(), &req.prompt)?;
    let latent_count = req.latent_count.unwrap_or(DEFAULT_TRAIN_LATENTS).max(1);
    let worker_state = state.clone();
    let id = state
        .0
        .jobs
        .submit(JobKind::TrainMapper, None, move |job| {
            let state = worker_state;
            let backend = state.backend();
            let latents = sample_training_latents(backend, latent_count, cfg.seed);
            let model = train_mapper_with(
                backend,
                &guidance,
                &req.prompt,
                &latents,
                &cfg,
                |done, total| job.progress(done as f64 / total as f64),
            )?;
            let bytes = save_checkpoint(&model)?;
            let key =
                ArtifactKey::new(ArtifactKind::Mapper, content_fingerprint(&bytes), &req.name);
            state.store().put(&key, &bytes)?;
            Ok(JobOutcome {
                output: Some(json!({
                    "name": req.name,
                    "fingerprint": key.fingerprint,
                    "final_loss": model.meta.loss_history.last(),
                })),
                result: Some(key),
            })
        })?;
    Ok(accepted(id))
}

async fn list_mappers(State(state): State<AppState>) -> Json<serde_json::Value> {
    // Latest checkpoint per name.
    let mut latest = std::collections::BTreeMap::new();
    for r in state.store().list(ArtifactKind::Mapper) {
        latest.insert(r.key.label.clone(), r);
    }
    Json(json!(latest
        .into_values()
        .map(|r| json!({
            "name": r.key.label,
            "fingerprint": r.key.fingerprint,
            "created_at": r.created_at,
            "size": r.size,
        }))
        .collect::<Vec<_>>()))
}

#[derive(Debug, Deserialize)]
pub struct ApplyRequest {
    pub image_id: String,
}

async fn apply_named_mapper(
    State(state): State<AppState>,
    Path(name): Path<String>,
    Json(req): Json<ApplyRequest>,
) -> ApiResult<Json<serde_json::Value>> {
    blocking(move || {
        let record = state
            .store()
            .find_label(ArtifactKind::Mapper, &name)
            .ok_or_else(|| ApiError::not_found(format!("unknown mapper {name}")))?;
        let bytes = state
            .store()
            .get(ArtifactKind::Mapper, &record.key.fingerprint)?;
        let model = load_checkpoint(&bytes, Some(state.backend().geometry()))?;
        let session = state.session(&req.image_id)?;
        let (_, image) = apply_mapper(state.backend(), &model, &session.w)?;
        Ok(Json(json!({
            "image": png_base64(&image)?,
            "mapper": record.key.fingerprint,
        })))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
pub struct PrecomputeRequest {
    pub pair_count: Option<usize>,
    pub perturb_alpha: Option<f64>,
    pub seed: Option<u64>,
    pub sample_count: Option<usize>,
}

async fn precompute(
    State(state): State<AppState>,
    body: Option<Json<PrecomputeRequest>>,
) -> ApiResult<Response> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let params = StatsParams {
        sample_count: req.sample_count.unwrap_or(DEFAULT_SAMPLE_COUNT),
        pair_count: req.pair_count.unwrap_or(DEFAULT_PAIR_COUNT),
        perturb_alpha: req.perturb_alpha.unwrap_or(DEFAULT_PERTURB_ALPHA),
        seed: req.seed.unwrap_or(0),
    };
    params.validate()?;
    let key = params.key(state.backend().fingerprint());
    let worker_state = state.clone();
    let job_key = key.clone();
    let id = state
        .0
        .jobs
        .submit(JobKind::Precompute, Some(key), move |job| {
            let state = worker_state;
            let artifact =
                ArtifactKey::new(ArtifactKind::Stats, &job_key, state.backend().fingerprint());
            if !state.store().contains(ArtifactKind::Stats, &job_key) {
                let stats = precompute_channel_stats(state.backend(), &params, |done, total| {
                    job.progress(done as f64 / total as f64)
                })?;
                state.store().put(&artifact, &stats.encode()?)?;
            }
            Ok(JobOutcome {
                output: Some(json!({ "stats": job_key, "params": params })),
                result: Some(artifact),
            })
        })?;
    Ok(accepted(id))
}

#[derive(Debug, Deserialize)]
pub struct ArtifactQuery {
    pub kind: Option<String>,
}

async fn list_artifacts(
    State(state): State<AppState>,
    Query(q): Query<ArtifactQuery>,
) -> ApiResult<Json<Vec<crate::store::ArtifactRecord>>> {
    let kinds = match q.kind {
        Some(k) => vec![k.parse::<ArtifactKind>()?],
        None => ArtifactKind::ALL.to_vec(),
    };
    Ok(Json(
        kinds
            .into_iter()
            .flat_map(|k| state.store().list(k))
            .collect(),
    ))
}

async fn fetch_artifact(
    State(state): State<AppState>,
    Path((kind, fingerprint)): Path<(String, String)>,
) -> ApiResult<Response> {
    let kind: ArtifactKind = kind.parse()?;
    let bytes = state.store().get(kind, &fingerprint)?;
    let content_type = match kind {
        ArtifactKind::Image => "image/png",
        ArtifactKind::Trace => "text/csv",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}
