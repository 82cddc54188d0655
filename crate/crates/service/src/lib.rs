//! HTTP+JSON service over the shared review pipeline.
//!
//! Analyses are content addressed: the id is a hash of the incidence table
//! and the resolved config snapshot, so identical requests share one
//! computation and one immutable result.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use aesk_core::clustering::{ClusterLabeler, ClusterParams, MedoidLabeler};
use aesk_core::config::RunConfig;
use aesk_core::disproportionality::PriorConfig;
use aesk_core::ingest::{self, IncidenceTable, IngestError, Lexicon, Transport};
use aesk_core::knowledge::EmbeddingStore;
use aesk_core::pipeline::{self, PipelineError};
use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::watch;
use tracing::{info, warn};

/// Seconds a client should wait before retrying after a registry failure.
pub const RETRY_AFTER_SECS: u64 = 30;

pub const FALLBACK_SOURCE: &str = "fallback";
pub const FILE_SOURCE: &str = "file";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorOverride {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterOverride {
    pub min_cluster_size: Option<usize>,
    pub epsilon: Option<f64>,
}

/// Body of `POST /analyses`. Unset fields take the service defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisRequest {
    pub study_id: String,
    #[serde(default)]
    pub prior: PriorOverride,
    #[serde(default)]
    pub cluster: ClusterOverride,
    #[serde(default)]
    pub descriptors: Option<Vec<String>>,
    /// `fallback`, or `file` when the service was started with an
    /// embedding file.
    #[serde(default)]
    pub embedding_source: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisHandle {
    pub analysis_id: String,
    pub status: AnalysisStatus,
    pub created_at: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
enum Outcome {
    Running,
    Done(Arc<Vec<u8>>),
    Failed(String),
}

struct Entry {
    created_at: u64,
    outcome: watch::Sender<Outcome>,
}

impl Entry {
    fn handle(&self, id: &str) -> AnalysisHandle {
        let (status, error) = match &*self.outcome.borrow() {
            Outcome::Running => (AnalysisStatus::Running, None),
            Outcome::Done(_) => (AnalysisStatus::Done, None),
            Outcome::Failed(e) => (AnalysisStatus::Failed, Some(e.clone())),
        };
        AnalysisHandle { analysis_id: id.to_string(), status, created_at: self.created_at, error }
    }
}

pub struct AppState {
    config: RunConfig,
    transport: Arc<dyn Transport>,
    lexicon: Option<Arc<Lexicon>>,
    stores: BTreeMap<&'static str, Arc<EmbeddingStore>>,
    labeler: Arc<dyn ClusterLabeler>,
    analyses: Mutex<HashMap<String, Arc<Entry>>>,
}

impl AppState {
    /// Loads the embedding stores and lexicon named by `config`.
    pub fn new(config: RunConfig, transport: Arc<dyn Transport>) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut fallback_config = config.clone();
        fallback_config.embedding_path = None;
        let mut stores = BTreeMap::from([(FALLBACK_SOURCE, Arc::new(pipeline::build_store(&fallback_config)?))]);
        if config.embedding_path.is_some() {
            stores.insert(FILE_SOURCE, Arc::new(pipeline::build_store(&config)?));
        }
        let lexicon = match &config.lexicon {
            Some(path) => Some(Arc::new(Lexicon::load(path)?)),
            None => None,
        };
        Ok(Self {
            config,
            transport,
            lexicon,
            stores,
            labeler: Arc::new(MedoidLabeler),
            analyses: Mutex::new(HashMap::new()),
        })
    }

    /// Replaces the default medoid labeler for every analysis this state runs.
    pub fn with_labeler(mut self, labeler: Arc<dyn ClusterLabeler>) -> Self {
        self.labeler = labeler;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn default_source(&self) -> &'static str {
        if self.stores.contains_key(FILE_SOURCE) {
            FILE_SOURCE
        } else {
            FALLBACK_SOURCE
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/studies", get(list_studies))
        .route("/studies/{id}/incidence", get(incidence))
        .route("/analyses", post(create_analysis))
        .route("/analyses/{id}", get(analysis_status))
        .route("/analyses/{id}/artifacts", get(analysis_artifacts))
        .with_state(state)
}

/// Binds `service.bind:service.port` and serves until the process exits.
pub async fn serve(state: Arc<AppState>) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", state.config.service_bind, state.config.service_port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bind address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!(%addr, "review service listening");
    axum::serve(listener, router(state)).await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
    retry_after: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, body: json!({ "error": message.into() }), retry_after: None }
    }

    fn validation(fields: Vec<(String, String)>) -> Self {
        let fields: Vec<Value> = fields.into_iter().map(|(f, m)| json!({ "field": f, "message": m })).collect();
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: json!({ "error": "validation failed", "fields": fields }),
            retry_after: None,
        }
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        match e {
            IngestError::InvalidStudyId(_) | IngestError::NotFound { .. } | IngestError::NoResults { .. } => {
                Self::new(StatusCode::NOT_FOUND, e.to_string())
            }
            IngestError::Upstream { .. } | IngestError::Schema { .. } => Self {
                retry_after: Some(RETRY_AFTER_SECS),
                ..Self::new(StatusCode::BAD_GATEWAY, e.to_string())
            },
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut resp = (self.status, Json(self.body)).into_response();
        if let Some(secs) = self.retry_after {
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(secs));
        }
        resp
    }
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn list_studies(State(state): State<Arc<AppState>>) -> Result<Json<Value>, ApiError> {
    let ids = ingest::registry::cached_study_ids(&state.config.cache_dir)?;
    Ok(Json(json!({ "studies": ids })))
}

async fn load_table(state: &Arc<AppState>, study_id: &str) -> Result<IncidenceTable, ApiError> {
    let state = state.clone();
    let id = study_id.to_string();
    tokio::task::spawn_blocking(move || {
        let record = ingest::fetch_study(
            &id,
            &state.config.registry_endpoint,
            &state.config.cache_dir,
            state.transport.as_ref(),
        )?;
        let merged = ingest::merge_serious_other(&record, state.lexicon.as_deref())?;
        Ok(merged.table)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn incidence(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<IncidenceTable>, ApiError> {
    Ok(Json(load_table(&state, &id).await?))
}

/// Applies request overrides to the service config, collecting every
/// invalid field.
fn resolve(state: &AppState, req: &AnalysisRequest) -> Result<(RunConfig, Arc<EmbeddingStore>), ApiError> {
    let mut config = state.config.clone();
    let mut errors = Vec::new();

    let alpha = req.prior.alpha.unwrap_or(config.prior.alpha);
    let beta = req.prior.beta.unwrap_or(config.prior.beta);
    for (field, v) in [("prior.alpha", alpha), ("prior.beta", beta)] {
        if !(v.is_finite() && v > 0.0) {
            errors.push((field.to_string(), format!("must be a positive finite number, got {v}")));
        }
    }
    config.prior = PriorConfig { alpha, beta };
    config.cluster = ClusterParams {
        min_cluster_size: req.cluster.min_cluster_size.unwrap_or(config.cluster.min_cluster_size),
        epsilon: req.cluster.epsilon.or(config.cluster.epsilon),
    };
    if let Some(d) = &req.descriptors {
        config.descriptors = d.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    if config.descriptors.is_empty() {
        errors.push(("descriptors".into(), "at least one population descriptor is required".into()));
    }

    let source = req.embedding_source.as_deref().unwrap_or(state.default_source());
    let store = state.stores.get(source).cloned();
    if store.is_none() {
        let known: Vec<&str> = state.stores.keys().copied().collect();
        errors.push(("embedding_source".into(), format!("unknown source {source:?}; available: {known:?}")));
    }
    if source == FALLBACK_SOURCE {
        config.embedding_path = None;
    }
    if errors.is_empty() {
        if let Err(aesk_core::config::ConfigError::InvalidValue { key, message }) = config.validate() {
            errors.push((key, message));
        }
    }
    match store {
        Some(store) if errors.is_empty() => Ok((config, store)),
        _ => Err(ApiError::validation(errors)),
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

async fn create_analysis(
    State(state): State<Arc<AppState>>,
    body: Result<Json<AnalysisRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    let (config, store) = resolve(&state, &req)?;
    let table = load_table(&state, req.study_id.trim()).await?;
    let id = pipeline::analysis_id(&table, &config);

    let (entry, fresh) = {
        let mut analyses = state.analyses.lock().expect("analysis store poisoned");
        match analyses.get(&id) {
            Some(e) => (e.clone(), false),
            None => {
                let (tx, _) = watch::channel(Outcome::Running);
                let e = Arc::new(Entry { created_at: now_unix(), outcome: tx });
                analyses.insert(id.clone(), e.clone());
                (e, true)
            }
        }
    };
    let sync = table.rows().len() <= state.config.sync_threshold;

    if fresh {
        let entry = entry.clone();
        let analysis = id.clone();
        let labeler = state.labeler.clone();
        // runs to completion even if this request is dropped
        tokio::task::spawn_blocking(move || {
            let outcome = match pipeline::analyze_with_labeler(&table, &store, &config, labeler.as_ref()) {
                Ok(artifacts) => Outcome::Done(Arc::new(artifacts.to_json())),
                Err(e) => {
                    warn!(analysis_id = %analysis, error = %e, "analysis failed");
                    Outcome::Failed(e.to_string())
                }
            };
            entry.outcome.send_replace(outcome);
        });
    }

    if sync {
        let mut rx = entry.outcome.subscribe();
        let _ = rx.wait_for(|o| !matches!(o, Outcome::Running)).await;
    }
    let handle = entry.handle(&id);
    let status = match handle.status {
        AnalysisStatus::Running => StatusCode::ACCEPTED,
        AnalysisStatus::Done => StatusCode::OK,
        AnalysisStatus::Failed => StatusCode::UNPROCESSABLE_ENTITY,
    };
    Ok((status, Json(handle)).into_response())
}

fn lookup(state: &AppState, id: &str) -> Result<Arc<Entry>, ApiError> {
    state
        .analyses
        .lock()
        .expect("analysis store poisoned")
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown analysis {id}")))
}

async fn analysis_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<AnalysisHandle>, ApiError> {
    Ok(Json(lookup(&state, &id)?.handle(&id)))
}

async fn analysis_artifacts(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let entry = lookup(&state, &id)?;
    let outcome = entry.outcome.borrow().clone();
    match outcome {
        Outcome::Done(bytes) => Ok(Response::builder()
            .status(StatusCode::OK)
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(bytes.as_ref().clone()))
            .expect("static response parts")),
        Outcome::Running => Ok((StatusCode::CONFLICT, Json(entry.handle(&id))).into_response()),
        Outcome::Failed(_) => Ok((StatusCode::UNPROCESSABLE_ENTITY, Json(entry.handle(&id))).into_response()),
    }
}
