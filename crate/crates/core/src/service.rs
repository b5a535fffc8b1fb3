//! HTTP service: model scoring plus the annotation workflow (task leasing,
//! score submission, reference scale, label export) backed by an
//! append-only JSON-lines log.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datasets::{load_manifest, BinaryLabel, DatasetManifest, MAX_SCORE, MIN_SCORE};
use crate::explain::{grad_cam, overlay, CamOptions};
use crate::imaging::{preprocess, ImageTensor, ImagingError};
use crate::metrics::{binarize, DEFAULT_THRESHOLD};
use crate::qmodel::{load_checkpoint, predict_scores, QualityModel};
use crate::scale::{
    export_labels, shipped_scale, validate_annotation, AnnotationRecord, ExportPolicy,
    ReferenceScale, Violation,
};

pub const GRADER_HEADER: &str = "x-grader-id";
pub const SCALE_VERSION_HEADER: &str = "x-scale-version";
/// Value of `scale` selecting the bundled reference scale.
pub const BUILTIN_SCALE: &str = "builtin";
const MAX_UPLOAD: usize = 32 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("annotation log {path}: {message}")]
    Log { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] crate::qmodel::ModelError),
    #[error(transparent)]
    Dataset(#[from] crate::datasets::DatasetError),
    #[error(transparent)]
    Scale(#[from] crate::scale::ScaleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub checkpoint: Option<PathBuf>,
    /// Scale JSON path, or `"builtin"` for the bundled scale.
    pub scale: Option<String>,
    pub queue_manifest: Option<PathBuf>,
    pub annotation_log: PathBuf,
    pub cam_dir: PathBuf,
    pub listen: String,
    pub default_threshold: f64,
    pub lease_seconds: i64,
    pub export_policy: ExportPolicy,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            scale: None,
            queue_manifest: None,
            annotation_log: PathBuf::from("annotations.jsonl"),
            cam_dir: PathBuf::from("cam"),
            listen: "127.0.0.1:8080".into(),
            default_threshold: DEFAULT_THRESHOLD,
            lease_seconds: 600,
            export_policy: ExportPolicy::default(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Applies `FUNDUSQ_*` overrides from `lookup` (normally the process
    /// environment).
    pub fn apply_env(
        &mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<(), ServiceError> {
        if let Some(v) = lookup("FUNDUSQ_CHECKPOINT") {
            self.checkpoint = Some(v.into());
        }
        if let Some(v) = lookup("FUNDUSQ_SCALE") {
            self.scale = Some(v);
        }
        if let Some(v) = lookup("FUNDUSQ_QUEUE") {
            self.queue_manifest = Some(v.into());
        }
        if let Some(v) = lookup("FUNDUSQ_ANNOTATION_LOG") {
            self.annotation_log = v.into();
        }
        if let Some(v) = lookup("FUNDUSQ_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = lookup("FUNDUSQ_THRESHOLD") {
            self.default_threshold = v.parse().map_err(|_| {
                ServiceError::Config(format!("FUNDUSQ_THRESHOLD={v} is not a number"))
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(MIN_SCORE..=MAX_SCORE).contains(&self.default_threshold) {
            return Err(ServiceError::Config(format!(
                "default_threshold {} outside [1, 10]",
                self.default_threshold
            )));
        }
        if self.lease_seconds <= 0 {
            return Err(ServiceError::Config(
                "lease_seconds must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Time source for leases and server-side timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self(Mutex::new(start))
    }

    pub fn advance(&self, by: Duration) {
        *self.0.lock().expect("clock lock") += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().expect("clock lock")
    }
}

/// Append-only annotation log. Every accepted record is written and synced
/// before the call returns.
pub struct AnnotationLog {
    path: PathBuf,
    file: File,
    records: Vec<AnnotationRecord>,
    ids: HashMap<String, usize>,
}

impl AnnotationLog {
    /// Opens (or creates) the log and replays it. A partial final line left
    /// by a crash mid-write is cut off.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        let mut records = Vec::new();
        let mut good_len = 0u64;
        let mut torn = false;
        {
            let mut reader = BufReader::new(&mut file);
            let mut line = String::new();
            let mut lineno = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                if !line.ends_with('\n') {
                    torn = true;
                    break;
                }
                let record =
                    serde_json::from_str::<AnnotationRecord>(line.trim_end()).map_err(|e| {
                        ServiceError::Log {
                            path: path.clone(),
                            message: format!("line {lineno}: {e}"),
                        }
                    })?;
                records.push(record);
                good_len += n as u64;
            }
        }
        if torn {
            log::warn!("dropping partial final line of {}", path.display());
            file.set_len(good_len)?;
            file.seek(std::io::SeekFrom::End(0))?;
        }
        let ids = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.record_id.clone(), i))
            .collect();
        Ok(Self {
            path,
            file,
            records,
            ids,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[AnnotationRecord] {
        &self.records
    }

    pub fn get(&self, record_id: &str) -> Option<&AnnotationRecord> {
        self.ids.get(record_id).map(|&i| &self.records[i])
    }

    pub fn append(&mut self, record: AnnotationRecord) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        self.ids
            .insert(record.record_id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }
}

struct Lease {
    grader: String,
    expires: DateTime<Utc>,
}

struct Workflow {
    log: AnnotationLog,
    leases: HashMap<String, Lease>,
    annotated: HashSet<String>,
}

pub struct LoadedModel {
    pub model: QualityModel,
    pub version: String,
}

pub struct AppState {
    config: ServiceConfig,
    model: Option<Arc<LoadedModel>>,
    scale: Option<ReferenceScale>,
    queue: Option<DatasetManifest>,
    workflow: Mutex<Workflow>,
    clock: Arc<dyn Clock>,
}

impl AppState {
    /// Loads the checkpoint, scale, queue and annotation log named in
    /// `config`. Missing optional pieces leave their endpoints unavailable.
    pub fn from_config(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        config.validate()?;
        let model = match &config.checkpoint {
            Some(p) => {
                let (model, meta) = load_checkpoint(p)?;
                log::info!("loaded {} checkpoint {}", meta.stage, meta.content_hash);
                Some(Arc::new(LoadedModel {
                    model,
                    version: meta.content_hash,
                }))
            }
            None => None,
        };
        let scale = match config.scale.as_deref() {
            Some(BUILTIN_SCALE) => Some(shipped_scale()),
            Some(p) if Path::new(p).exists() => Some(ReferenceScale::load(p)?),
            Some(p) => {
                log::warn!("scale file {p} not found; reference scale unavailable");
                None
            }
            None => None,
        };
        let queue = config
            .queue_manifest
            .as_ref()
            .map(load_manifest)
            .transpose()?;
        let log = AnnotationLog::open(&config.annotation_log)?;
        let annotated = log.records().iter().map(|r| r.image_id.clone()).collect();
        Ok(Self {
            model,
            scale,
            queue,
            workflow: Mutex::new(Workflow {
                log,
                leases: HashMap::new(),
                annotated,
            }),
            clock,
            config,
        })
    }

    pub fn with_model(mut self, model: QualityModel, version: impl Into<String>) -> Self {
        self.model = Some(Arc::new(LoadedModel {
            model,
            version: version.into(),
        }));
        self
    }

    pub fn annotation_count(&self) -> usize {
        self.workflow
            .lock()
            .expect("workflow lock")
            .log
            .records()
            .len()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    violations: Vec<Violation>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            violations: Vec::new(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        #[derive(Serialize)]
        struct Body {
            error: String,
            #[serde(skip_serializing_if = "Vec::is_empty")]
            violations: Vec<Violation>,
        }
        let body = Body {
            error: self.message,
            violations: self.violations,
        };
        (self.status, Json(body)).into_response()
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    /// Model output clamped to `[1, 10]`.
    pub score: f64,
    pub label: BinaryLabel,
    pub threshold: f64,
    pub model_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cam_uri: Option<String>,
    /// Unclamped model output.
    pub raw_score: f64,
}

#[derive(Debug, Deserialize)]
struct ScoreQuery {
    threshold: Option<f64>,
    #[serde(default)]
    cam: bool,
}

async fn read_image_field(mut multipart: Multipart) -> Result<Bytes, ApiError> {
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?
    {
        if field.name() == Some("image") {
            return field
                .bytes()
                .await
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()));
        }
    }
    Err(ApiError::new(
        StatusCode::BAD_REQUEST,
        "multipart field `image` missing",
    ))
}

/// Scores decoded image bytes. Shared by the HTTP handler and tests.
pub fn score_image(
    loaded: &LoadedModel,
    bytes: &[u8],
    threshold: f64,
    cam_dir: Option<&Path>,
) -> Result<ScoreResponse, ApiError> {
    let raw = ImageTensor::decode(bytes)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let input = preprocess(&raw, loaded.model.preprocess_config()).map_err(|e| match e {
        ImagingError::AllBlackImage => {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
        }
        other => ApiError::new(StatusCode::BAD_REQUEST, other.to_string()),
    })?;
    let raw_score =
        predict_scores(&loaded.model, std::slice::from_ref(&input)).map_err(internal)?[0] as f64;
    let score = raw_score.clamp(MIN_SCORE, MAX_SCORE);
    let label = binarize(&[score], threshold)[0];
    let cam_uri = match cam_dir {
        Some(dir) => {
            let heatmap =
                grad_cam(&loaded.model, &input, None, CamOptions::default()).map_err(internal)?;
            let digest = hex::encode(Sha256::digest(bytes));
            let name = format!(
                "{}-{}.png",
                &digest[..16],
                &loaded.version[..16.min(loaded.version.len())]
            );
            fs::create_dir_all(dir).map_err(internal)?;
            overlay(&heatmap, &input, 0.4)
                .map_err(internal)?
                .to_rgb8()
                .save(dir.join(&name))
                .map_err(internal)?;
            Some(format!("/v1/cam/{name}"))
        }
        None => None,
    };
    Ok(ScoreResponse {
        score,
        label,
        threshold,
        model_version: loaded.version.clone(),
        cam_uri,
        raw_score,
    })
}

async fn score(
    State(state): State<Arc<AppState>>,
    Query(q): Query<ScoreQuery>,
    multipart: Multipart,
) -> Result<Json<ScoreResponse>, ApiError> {
    let loaded = state
        .model
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))?;
    let threshold = q.threshold.unwrap_or(state.config.default_threshold);
    if !(MIN_SCORE..=MAX_SCORE).contains(&threshold) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "threshold outside [1, 10]",
        ));
    }
    let bytes = read_image_field(multipart).await?;
    let cam_dir = q.cam.then(|| state.config.cam_dir.clone());
    let resp = tokio::task::spawn_blocking(move || {
        score_image(&loaded, &bytes, threshold, cam_dir.as_deref())
    })
    .await
    .map_err(internal)??;
    Ok(Json(resp))
}

async fn cam_artifact(
    State(state): State<Arc<AppState>>,
    UrlPath(name): UrlPath<String>,
) -> Result<Response, ApiError> {
    let valid = name.ends_with(".png")
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.')
        && !name.contains("..");
    if !valid {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid artifact name",
        ));
    }
    let bytes = fs::read(state.config.cam_dir.join(&name))
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "no such artifact"))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn reference_scale(State(state): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let scale = state.scale.as_ref().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "no reference scale configured",
        )
    })?;
    let version = HeaderValue::from_str(&scale.version).map_err(internal)?;
    Ok(([(SCALE_VERSION_HEADER, version)], Json(scale.clone())).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub image_id: String,
    pub image_uri: String,
    /// Images still lacking an annotation, this one included.
    pub remaining: usize,
    pub scale_version: String,
}

fn grader_id(headers: &HeaderMap) -> Result<String, ApiError> {
    headers
        .get(GRADER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("{GRADER_HEADER} header missing"),
            )
        })
}

async fn next_task(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let grader = grader_id(&headers)?;
    let queue = state.queue.as_ref().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "no annotation queue configured",
        )
    })?;
    let now = state.clock.now();
    let mut wf = state.workflow.lock().expect("workflow lock");
    wf.leases.retain(|_, l| l.expires > now);
    let pending: Vec<_> = queue
        .records
        .iter()
        .filter(|r| !wf.annotated.contains(&r.id))
        .collect();
    let own = pending
        .iter()
        .find(|r| wf.leases.get(&r.id).is_some_and(|l| l.grader == grader));
    let pick = own
        .or_else(|| pending.iter().find(|r| !wf.leases.contains_key(&r.id)))
        .copied();
    let Some(record) = pick else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    wf.leases.insert(
        record.id.clone(),
        Lease {
            grader,
            expires: now + Duration::seconds(state.config.lease_seconds),
        },
    );
    let task = AnnotationTask {
        task_id: record.id.clone(),
        image_id: record.id.clone(),
        image_uri: record.image_uri.clone(),
        remaining: pending.len(),
        scale_version: state
            .scale
            .as_ref()
            .map(|s| s.version.clone())
            .unwrap_or_default(),
    };
    Ok(Json(task).into_response())
}

/// Request body for `POST /v1/annotation`. `record_id` acts as an
/// idempotency key; a resubmission with the same id and content is
/// acknowledged without writing again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSubmission {
    #[serde(default)]
    pub record_id: Option<String>,
    pub image_id: String,
    pub grader_id: String,
    pub score: f64,
    pub scale_version: String,
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

async fn submit_annotation(
    State(state): State<Arc<AppState>>,
    Json(sub): Json<AnnotationSubmission>,
) -> Result<Response, ApiError> {
    let scale = state.scale.as_ref().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "no reference scale configured",
        )
    })?;
    if let Some(queue) = &state.queue {
        if !queue.records.iter().any(|r| r.id == sub.image_id) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("unknown image {}", sub.image_id),
            ));
        }
    }
    let mut wf = state.workflow.lock().expect("workflow lock");
    let record = AnnotationRecord {
        record_id: sub.record_id.clone().unwrap_or_else(|| {
            format!(
                "{}:{}:{}",
                sub.image_id,
                sub.grader_id,
                wf.log.records().len()
            )
        }),
        image_id: sub.image_id,
        grader_id: sub.grader_id,
        score: sub.score,
        timestamp: sub.timestamp.unwrap_or_else(|| state.clock.now()),
        scale_version: sub.scale_version,
    };
    if let Err(violations) = validate_annotation(&record, scale) {
        let mut err = ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        );
        err.violations = violations;
        return Err(err);
    }
    if let Some(existing) = wf.log.get(&record.record_id) {
        let same = existing.image_id == record.image_id
            && existing.grader_id == record.grader_id
            && existing.score == record.score;
        return if same {
            Ok((StatusCode::OK, Json(existing.clone())).into_response())
        } else {
            Err(ApiError::new(
                StatusCode::CONFLICT,
                "record_id already used for a different annotation",
            ))
        };
    }
    wf.log.append(record.clone()).map_err(internal)?;
    wf.leases.remove(&record.image_id);
    wf.annotated.insert(record.image_id.clone());
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn export(State(state): State<Arc<AppState>>) -> Response {
    let wf = state.workflow.lock().expect("workflow lock");
    let manifest = export_labels(
        wf.log.records(),
        state.config.export_policy,
        state.queue.as_ref(),
    );
    (
        [(header::CONTENT_TYPE, "application/x-ndjson")],
        manifest.to_string(),
    )
        .into_response()
}

async fn health() -> &'static str {
    "ok"
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/score", post(score))
        .route("/v1/cam/{name}", get(cam_artifact))
        .route("/v1/reference-scale", get(reference_scale))
        .route("/v1/annotation/next", get(next_task))
        .route("/v1/annotation", post(submit_annotation))
        .route("/v1/annotation/export", get(export))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

/// Binds `config.listen` and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let listen = config.listen.clone();
    let state = Arc::new(AppState::from_config(config, Arc::new(SystemClock))?);
    let listener = tokio::net::TcpListener::bind(&listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, score: f64) -> AnnotationRecord {
        AnnotationRecord {
            record_id: id.into(),
            image_id: format!("img-{id}"),
            grader_id: "g".into(),
            score,
            timestamp: DateTime::<Utc>::UNIX_EPOCH,
            scale_version: "1.0".into(),
        }
    }

    #[test]
    fn log_replays_and_drops_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        {
            let mut log = AnnotationLog::open(&path).unwrap();
            log.append(rec("a", 7.5)).unwrap();
            log.append(rec("b", 3.0)).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"record_id\":\"c\",\"ima").unwrap();
        drop(f);
        let mut log = AnnotationLog::open(&path).unwrap();
        assert_eq!(log.records().len(), 2);
        log.append(rec("d", 5.0)).unwrap();
        let log = AnnotationLog::open(&path).unwrap();
        let ids: Vec<&str> = log.records().iter().map(|r| r.record_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "d"]);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        fs::write(&path, "garbage\n{}\n").unwrap();
        assert!(matches!(
            AnnotationLog::open(&path),
            Err(ServiceError::Log { .. })
        ));
    }

    #[test]
    fn env_overrides() {
        let mut c = ServiceConfig::default();
        let env: HashMap<&str, &str> =
            [("FUNDUSQ_THRESHOLD", "7"), ("FUNDUSQ_LISTEN", "0.0.0.0:9")].into();
        c.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(c.default_threshold, 7.0);
        assert_eq!(c.listen, "0.0.0.0:9");
        let mut c = ServiceConfig::default();
        assert!(c.apply_env(|_| Some("x".into())).is_err());
        assert!(serde_json::from_str::<ServiceConfig>(r#"{"nope":1}"#).is_err());
    }
}
