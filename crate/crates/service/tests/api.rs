use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use aesk_core::clustering::{ClusterLabeler, LabelerError, MedoidLabeler};
use aesk_core::config::RunConfig;
use aesk_core::ingest::{HttpResponse, Transport, TransportError};
use aesk_core::knowledge::TermEmbedding;
use aesk_service::{router, AppState};
use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const STUDY: &str = "NCT02348593";

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

enum Canned {
    NotFound,
    Timeout,
}

struct CannedTransport {
    mode: Canned,
    calls: AtomicUsize,
}

impl Transport for CannedTransport {
    fn get(&self, _url: &str) -> Result<HttpResponse, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.mode {
            Canned::NotFound => Ok(HttpResponse { status: 404, body: b"{}".to_vec() }),
            Canned::Timeout => Err(TransportError::Timeout),
        }
    }
}

struct Fixture {
    _cache: tempfile::TempDir,
    config: RunConfig,
}

fn fixture(warm: bool) -> Fixture {
    let cache = tempfile::tempdir().unwrap();
    if warm {
        let name = format!("{STUDY}.json");
        std::fs::copy(fixtures().join("cache").join(&name), cache.path().join(&name)).unwrap();
    }
    let mut config = RunConfig::default();
    config.cache_dir = cache.path().to_path_buf();
    config.embedding_path = Some(fixtures().join("narcolepsy_embeddings.tsv"));
    config.descriptors = vec!["Narcolepsy".into(), "Excessive daytime sleepiness".into()];
    Fixture { _cache: cache, config }
}

fn app_with(config: RunConfig, mode: Canned, labeler: Option<Arc<dyn ClusterLabeler>>) -> (Router, Arc<CannedTransport>) {
    let transport = Arc::new(CannedTransport { mode, calls: AtomicUsize::new(0) });
    let mut state = AppState::new(config, transport.clone()).unwrap();
    if let Some(l) = labeler {
        state = state.with_labeler(l);
    }
    (router(Arc::new(state)), transport)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/analyses")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, _, bytes) = send(app, req).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn health_and_study_list() {
    let f = fixture(true);
    let (app, _) = app_with(f.config.clone(), Canned::NotFound, None);
    let (status, _, body) = get(&app, "/healthz").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body), json!({ "status": "ok" }));
    let (status, _, body) = get(&app, "/studies").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body), json!({ "studies": [STUDY] }));
}

#[tokio::test]
async fn incidence_table_from_cache() {
    let f = fixture(true);
    let (app, transport) = app_with(f.config.clone(), Canned::NotFound, None);
    let (status, _, body) = get(&app, &format!("/studies/{STUDY}/incidence")).await;
    assert_eq!(status, StatusCode::OK);
    let table = json_of(&body);
    assert_eq!(table["rows"].as_array().unwrap().len(), 12);
    assert_eq!(table["arms"].as_array().unwrap().len(), 4);
    assert_eq!(transport.calls.load(Ordering::SeqCst), 0);
}

#[tokio::test]
async fn unknown_study_is_404() {
    let f = fixture(true);
    let (app, _) = app_with(f.config.clone(), Canned::NotFound, None);
    let (status, _, _) = get(&app, "/studies/NCT00000000/incidence").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = get(&app, "/studies/not-an-id/incidence").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn registry_timeout_is_502_with_retry_after() {
    let f = fixture(false);
    let (app, _) = app_with(f.config.clone(), Canned::Timeout, None);
    let (status, headers, body) = get(&app, &format!("/studies/{STUDY}/incidence")).await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(headers[header::RETRY_AFTER], "30");
    assert!(json_of(&body)["error"].as_str().unwrap().contains("timed out"));
}

#[tokio::test]
async fn identical_requests_share_an_analysis() {
    let f = fixture(true);
    let (app, _) = app_with(f.config.clone(), Canned::NotFound, None);
    let request = json!({ "study_id": STUDY, "prior": { "alpha": 0.5, "beta": 0.5 } });
    let (s1, h1) = post(&app, request.clone()).await;
    let (s2, h2) = post(&app, request).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(h1["status"], "done");
    assert_eq!(h1["analysis_id"], h2["analysis_id"]);
    assert_eq!(h1["created_at"], h2["created_at"]);

    let id = h1["analysis_id"].as_str().unwrap();
    let (status, headers, first) = get(&app, &format!("/analyses/{id}/artifacts")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], "application/json");
    let (_, _, second) = get(&app, &format!("/analyses/{id}/artifacts")).await;
    assert_eq!(first, second);

    let artifacts = json_of(&first);
    assert_eq!(artifacts["study_id"], STUDY);
    assert_eq!(artifacts["config_snapshot"]["prior.alpha"], json!(0.5));
    for key in ["map_points", "evd_points", "cluster_signals", "ungrouped_terms", "schema_version"] {
        assert!(artifacts.get(key).is_some(), "missing {key}");
    }

    let (status, _, body) = get(&app, &format!("/analyses/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["status"], "done");
}

#[tokio::test]
async fn changed_parameters_give_a_new_analysis() {
    let f = fixture(true);
    let (app, _) = app_with(f.config.clone(), Canned::NotFound, None);
    let (_, a) = post(&app, json!({ "study_id": STUDY })).await;
    let (_, b) = post(&app, json!({ "study_id": STUDY, "prior": { "alpha": 1.0 } })).await;
    let (_, c) = post(&app, json!({ "study_id": STUDY, "cluster": { "min_cluster_size": 4 } })).await;
    assert_ne!(a["analysis_id"], b["analysis_id"]);
    assert_ne!(a["analysis_id"], c["analysis_id"]);
    assert_ne!(b["analysis_id"], c["analysis_id"]);
}

#[tokio::test]
async fn invalid_requests_are_422() {
    let f = fixture(true);
    let (app, _) = app_with(f.config.clone(), Canned::NotFound, None);

    let (status, body) = post(&app, json!({ "study_id": STUDY, "prior": { "alpha": 0.0 } })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["fields"][0]["field"], "prior.alpha");

    let (status, body) = post(&app, json!({ "study_id": STUDY, "embedding_source": "word2vec" })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["fields"][0]["field"], "embedding_source");

    let (status, body) = post(&app, json!({ "study_id": STUDY, "descriptors": [] })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["fields"][0]["field"], "descriptors");

    let (status, _) = post(&app, json!({ "study": STUDY })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn unknown_analysis_is_404() {
    let f = fixture(true);
    let (app, _) = app_with(f.config.clone(), Canned::NotFound, None);
    let (status, _, _) = get(&app, "/analyses/feedface/artifacts").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

/// Holds every labeling call until released; counts calls.
#[derive(Default)]
struct GatedLabeler {
    open: Mutex<bool>,
    cv: Condvar,
    calls: AtomicUsize,
}

impl GatedLabeler {
    fn release(&self) {
        *self.open.lock().unwrap() = true;
        self.cv.notify_all();
    }
}

impl ClusterLabeler for GatedLabeler {
    fn name(&self) -> &str {
        "gated"
    }

    fn label(&self, id: usize, members: &[TermEmbedding]) -> Result<String, LabelerError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut open = self.open.lock().unwrap();
        while !*open {
            open = self.cv.wait(open).unwrap();
        }
        MedoidLabeler.label(id, members)
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn large_analyses_run_in_background_and_coalesce() {
    let f = fixture(true);
    let mut config = f.config.clone();
    config.sync_threshold = 0;
    let gate = Arc::new(GatedLabeler::default());
    let (app, _) = app_with(config, Canned::NotFound, Some(gate.clone()));

    let request = json!({ "study_id": STUDY });
    let (s1, h1) = post(&app, request.clone()).await;
    let (s2, h2) = post(&app, request).await;
    assert_eq!((s1, s2), (StatusCode::ACCEPTED, StatusCode::ACCEPTED));
    assert_eq!(h1["status"], "running");
    assert_eq!(h1["analysis_id"], h2["analysis_id"]);
    let id = h1["analysis_id"].as_str().unwrap().to_string();

    let (status, _, body) = get(&app, &format!("/analyses/{id}/artifacts")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(json_of(&body)["status"], "running");

    gate.release();
    let mut done = false;
    for _ in 0..200 {
        let (_, _, body) = get(&app, &format!("/analyses/{id}")).await;
        if json_of(&body)["status"] == "done" {
            done = true;
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert!(done, "analysis never finished");
    let (status, _, body) = get(&app, &format!("/analyses/{id}/artifacts")).await;
    assert_eq!(status, StatusCode::OK);
    let clusters = json_of(&body)["clusters"]["clusters"].as_array().unwrap().len();
    assert!(clusters > 0);
    // one computation despite two submissions
    assert_eq!(gate.calls.load(Ordering::SeqCst), clusters);
}
