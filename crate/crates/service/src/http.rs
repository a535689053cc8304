//! Job-oriented HTTP API over the artifact store.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use guidewalk_core::builtin::BUILTIN_NAMES;
use guidewalk_core::fieldio::{decode_field, render_pgm};
use guidewalk_core::oracle::ShapeDoc;
use guidewalk_core::{ConditionModel, Denoiser, Field, RunSpec};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::ServiceError;
use crate::exec::{execute, prepare, RunManifest, SpecContext};
use crate::store::{is_content_id, Store};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running { completed: u64, total: u64 },
    Done,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub run_id: String,
    #[serde(flatten)]
    pub state: JobState,
    #[serde(default)]
    pub artifacts: Vec<String>,
}

pub struct AppState {
    pub store: Store,
    pub ctx: SpecContext,
    jobs: Mutex<HashMap<String, JobRecord>>,
}

impl AppState {
    pub fn new(store: Store, ctx: SpecContext) -> Arc<AppState> {
        Arc::new(AppState {
            store,
            ctx,
            jobs: Mutex::new(HashMap::new()),
        })
    }

    fn set_state(&self, run_id: &str, state: JobState) {
        let mut jobs = self.jobs.lock().expect("job table lock");
        if let Some(rec) = jobs.get_mut(run_id) {
            rec.state = state;
        }
    }
}

struct ApiError(StatusCode, String);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::Validation(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Runtime(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn not_found(what: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, what.into())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/runs", post(post_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/samples/{index}", get(get_sample))
        .route("/runs/{id}/normmaps/{step}", get(get_normmap))
        .route("/runs/{id}/metrics", get(get_metrics))
        .route("/models", get(list_models))
        .route("/models/{name}", get(get_model))
        .route("/masks", post(post_mask))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    axum::serve(listener, router(state)).await
}

#[derive(Debug, Default, Deserialize)]
struct PostRunQuery {
    /// Run ID the client expects this payload to hash to.
    expect: Option<String>,
}

async fn post_run(
    State(app): State<Arc<AppState>>,
    Query(q): Query<PostRunQuery>,
    body: String,
) -> ApiResult<Response> {
    let spec = RunSpec::from_json(&body).map_err(ServiceError::from)?;
    let prepared = prepare(&app.store, &spec, &app.ctx)?;
    let id = prepared.run_id.clone();
    if let Some(expected) = q.expect.filter(|e| *e != id) {
        return Err(ApiError(
            StatusCode::CONFLICT,
            format!("payload hashes to {id}, not {expected}"),
        ));
    }
    {
        let mut jobs = app.jobs.lock().expect("job table lock");
        if jobs.contains_key(&id) {
            return Ok((StatusCode::OK, Json(json!({ "run_id": id }))).into_response());
        }
        if app.store.has_run(&id) {
            let stored = std::fs::read_to_string(app.store.run_dir(&id).join("runspec.json")).unwrap_or_default();
            if stored.trim_end() != prepared.spec.canonical_json() {
                return Err(ApiError(StatusCode::CONFLICT, format!("stored run {id} has a different spec")));
            }
            jobs.insert(id.clone(), done_record(&app.store, &id));
            return Ok((StatusCode::OK, Json(json!({ "run_id": id }))).into_response());
        }
        jobs.insert(
            id.clone(),
            JobRecord {
                run_id: id.clone(),
                state: JobState::Queued,
                artifacts: Vec::new(),
            },
        );
    }
    let worker = app.clone();
    tokio::task::spawn_blocking(move || {
        let id = prepared.run_id.clone();
        let step = |completed: u64, total: u64| {
            let stride = (total / 100).max(1);
            if completed % stride == 0 || completed == total {
                worker.set_state(&id, JobState::Running { completed, total });
            }
        };
        worker.set_state(&id, JobState::Running { completed: 0, total: 0 });
        match execute(&worker.store, &prepared, &step) {
            Ok(_) => {
                let rec = done_record(&worker.store, &id);
                worker.jobs.lock().expect("job table lock").insert(id, rec);
            }
            Err(e) => worker.set_state(&id, JobState::Failed { reason: e.to_string() }),
        }
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "run_id": id }))).into_response())
}

fn done_record(store: &Store, id: &str) -> JobRecord {
    let artifacts = RunManifest::load(&store.run_dir(id))
        .map(|m| artifact_list(&m))
        .unwrap_or_default();
    JobRecord {
        run_id: id.to_string(),
        state: JobState::Done,
        artifacts,
    }
}

fn artifact_list(m: &RunManifest) -> Vec<String> {
    let mut out = vec!["runspec.json".to_string(), "manifest.json".to_string()];
    for s in &m.samples {
        out.extend(s.field.clone());
        out.extend(s.image.as_ref().map(|i| i.file.clone()));
    }
    for n in &m.normmaps {
        out.push(n.field.clone());
        out.extend(n.image.as_ref().map(|i| i.file.clone()));
    }
    out.extend(m.metrics.clone());
    out
}

fn checked_id(id: &str) -> ApiResult<()> {
    if is_content_id(id) {
        Ok(())
    } else {
        Err(not_found(format!("unknown run `{id}`")))
    }
}

async fn get_run(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    checked_id(&id)?;
    if let Some(rec) = app.jobs.lock().expect("job table lock").get(&id) {
        return Ok(Json(rec.clone()));
    }
    if app.store.has_run(&id) {
        return Ok(Json(done_record(&app.store, &id)));
    }
    Err(not_found(format!("unknown run `{id}`")))
}

fn finished_manifest(app: &AppState, id: &str) -> ApiResult<RunManifest> {
    checked_id(id)?;
    if !app.store.has_run(id) {
        return Err(not_found(format!("run `{id}` has no artifacts")));
    }
    Ok(RunManifest::load(&app.store.run_dir(id))?)
}

#[derive(Debug, Default, Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

fn read_artifact(app: &AppState, id: &str, rel: &str) -> ApiResult<Vec<u8>> {
    std::fs::read(app.store.run_dir(id).join(rel)).map_err(|e| ApiError::from(ServiceError::from(e)))
}

fn gwf_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response()
}

fn pgm_response(field: &Field) -> ApiResult<Response> {
    let (bytes, _) = render_pgm(field).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/x-portable-graymap")], bytes).into_response())
}

async fn get_sample(
    State(app): State<Arc<AppState>>,
    Path((id, index)): Path<(String, usize)>,
    Query(q): Query<FormatQuery>,
) -> ApiResult<Response> {
    let manifest = finished_manifest(&app, &id)?;
    let entry = manifest
        .samples
        .get(index)
        .ok_or_else(|| not_found(format!("run `{id}` has no sample {index}")))?;
    match q.format.as_deref().unwrap_or("gwf") {
        "gwf" => {
            let file = entry.field.as_ref().ok_or_else(|| not_found("sample fields were not emitted"))?;
            Ok(gwf_response(read_artifact(&app, &id, file)?))
        }
        "pgm" => {
            if let Some(img) = &entry.image {
                let bytes = read_artifact(&app, &id, &img.file)?;
                return Ok(([(header::CONTENT_TYPE, "image/x-portable-graymap")], bytes).into_response());
            }
            let file = entry.field.as_ref().ok_or_else(|| not_found("sample was not emitted"))?;
            let field = decode_field(&read_artifact(&app, &id, file)?).map_err(ServiceError::from)?;
            pgm_response(&field)
        }
        other => Err(ApiError(StatusCode::BAD_REQUEST, format!("unknown format `{other}`"))),
    }
}

async fn get_normmap(
    State(app): State<Arc<AppState>>,
    Path((id, step)): Path<(String, usize)>,
    Query(q): Query<FormatQuery>,
) -> ApiResult<Response> {
    let manifest = finished_manifest(&app, &id)?;
    let entry = manifest
        .normmaps
        .iter()
        .find(|n| n.step == step)
        .ok_or_else(|| not_found(format!("run `{id}` has no norm map for step {step}")))?;
    match q.format.as_deref().unwrap_or("pgm") {
        "gwf" => Ok(gwf_response(read_artifact(&app, &id, &entry.field)?)),
        "pgm" => {
            let image = entry.image.as_ref().ok_or_else(|| not_found("norm map has no image"))?;
            let bytes = read_artifact(&app, &id, &image.file)?;
            Ok(([(header::CONTENT_TYPE, "image/x-portable-graymap")], bytes).into_response())
        }
        other => Err(ApiError(StatusCode::BAD_REQUEST, format!("unknown format `{other}`"))),
    }
}

async fn get_metrics(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let manifest = finished_manifest(&app, &id)?;
    let file = manifest.metrics.ok_or_else(|| not_found(format!("run `{id}` did not emit metrics")))?;
    let bytes = read_artifact(&app, &id, &file)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

#[derive(Debug, Serialize)]
struct ConditionInfo {
    id: String,
    components: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    variance: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ModelInfo {
    name: String,
    shape: ShapeDoc,
    conditions: Vec<ConditionInfo>,
}

fn model_info(name: &str, model: &ConditionModel) -> ModelInfo {
    let conditions = model
        .condition_ids()
        .map(|c| ConditionInfo {
            id: c.to_string(),
            components: model.components(c).map(|x| x.len()).unwrap_or(0),
            variance: model.single_gaussian(c).ok().flatten().map(|(_, v)| v),
        })
        .collect();
    ModelInfo {
        name: name.to_string(),
        shape: ShapeDoc::from_shape(model.shape()),
        conditions,
    }
}

fn model_names(app: &AppState) -> Vec<String> {
    let mut names: Vec<String> = BUILTIN_NAMES.iter().map(|s| s.to_string()).collect();
    if let Some(dir) = &app.ctx.model_dir {
        let mut extra: Vec<String> = std::fs::read_dir(dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "json").then(|| p.file_stem()?.to_str().map(str::to_string))?
            })
            .collect();
        extra.sort();
        names.extend(extra);
    }
    names
}

async fn list_models(State(app): State<Arc<AppState>>) -> ApiResult<Json<Vec<ModelInfo>>> {
    let res = app.ctx.resources(&app.store);
    let mut out = Vec::new();
    for name in model_names(&app) {
        if let Ok(model) = res.model(&name) {
            out.push(model_info(&name, &model));
        }
    }
    Ok(Json(out))
}

async fn get_model(State(app): State<Arc<AppState>>, Path(name): Path<String>) -> ApiResult<Json<ModelInfo>> {
    if !model_names(&app).contains(&name) {
        return Err(not_found(format!("unknown model `{name}`")));
    }
    let model = app.ctx.resources(&app.store).model(&name).map_err(ServiceError::from)?;
    Ok(Json(model_info(&name, &model)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskUpload {
    pub shape: ShapeDoc,
    pub values: Vec<f64>,
}

async fn post_mask(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let upload: MaskUpload =
        serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let shape = upload.shape.to_shape().map_err(ServiceError::from)?;
    let field = Field::new(shape, upload.values).map_err(ServiceError::from)?;
    let store = app.store.clone();
    let mask_id = tokio::task::spawn_blocking(move || store.put_mask(&field))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok((StatusCode::CREATED, Json(json!({ "mask_id": mask_id }))).into_response())
}
