//! ClinicalTrials.gov (API v2) study records with an on-disk response cache.
//!
//! Cache entries live at `<cache_dir>/<NCT id>.json`: one metadata line
//! (`#aesk-cache v1 fetched_at_unix=<secs> endpoint=<url>`) followed by the raw
//! response body. A present entry is always used; the network is touched only
//! on a cache miss.

use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde_json::Value;
use thiserror::Error;
use tracing::debug;

use super::{IngestError, RawArm, RawEvent, RawStudyRecord, Result};
use crate::fsutil::write_atomic;
use crate::terms::is_nct_id;

pub const DEFAULT_ENDPOINT: &str = "https://clinicaltrials.gov/api/v2";
const CACHE_MAGIC: &str = "#aesk-cache v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("{0}")]
    Failed(String),
}

/// Minimal blocking GET, so tests and the service can substitute the network.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, TransportError>;
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, TransportError> {
        (**self).get(url)
    }
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(30))
    }
}

impl Transport for UreqTransport {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, TransportError> {
        let mut resp = self
            .agent
            .get(url)
            .header("Accept", "application/json")
            .call()
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => TransportError::Timeout,
                other => TransportError::Failed(other.to_string()),
            })?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(64 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| TransportError::Failed(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

pub fn cache_path(cache_dir: &Path, study_id: &str) -> PathBuf {
    cache_dir.join(format!("{study_id}.json"))
}

/// Reads a cache entry, returning the raw body without the metadata line.
pub fn read_cached(cache_dir: &Path, study_id: &str) -> Result<Option<Vec<u8>>> {
    let path = cache_path(cache_dir, study_id);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    if !bytes.starts_with(CACHE_MAGIC.as_bytes()) {
        return Err(IngestError::Schema {
            path: path.display().to_string(),
            message: "missing cache metadata line".into(),
        });
    }
    let body_start = bytes.iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| i + 1);
    Ok(Some(bytes[body_start..].to_vec()))
}

pub fn write_cached(cache_dir: &Path, study_id: &str, endpoint: &str, body: &[u8]) -> Result<()> {
    let fetched = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut bytes = format!("{CACHE_MAGIC} fetched_at_unix={fetched} endpoint={endpoint}\n").into_bytes();
    bytes.extend_from_slice(body);
    write_atomic(&cache_path(cache_dir, study_id), &bytes)?;
    Ok(())
}

/// Study ids with a cache entry, sorted.
pub fn cached_study_ids(cache_dir: &Path) -> Result<Vec<String>> {
    let entries = match std::fs::read_dir(cache_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut ids = Vec::new();
    for entry in entries {
        let name = entry?.file_name();
        if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".json")) {
            if is_nct_id(id) {
                ids.push(id.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Where a fetched record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Cache,
    Network,
}

/// Returns the adverse-events section of a study, from cache when present.
pub fn fetch_study(
    study_id: &str,
    endpoint: &str,
    cache_dir: &Path,
    transport: &dyn Transport,
) -> Result<RawStudyRecord> {
    fetch_study_with_source(study_id, endpoint, cache_dir, transport).map(|(r, _)| r)
}

pub fn fetch_study_with_source(
    study_id: &str,
    endpoint: &str,
    cache_dir: &Path,
    transport: &dyn Transport,
) -> Result<(RawStudyRecord, Source)> {
    if !is_nct_id(study_id) {
        return Err(IngestError::InvalidStudyId(study_id.to_string()));
    }
    if let Some(body) = read_cached(cache_dir, study_id)? {
        debug!(study_id, "registry cache hit");
        return parse_study_json(study_id, &body).map(|r| (r, Source::Cache));
    }

    let url = format!("{}/studies/{study_id}", endpoint.trim_end_matches('/'));
    debug!(%url, "fetching study record");
    let resp = transport.get(&url).map_err(|e| IngestError::Upstream {
        timed_out: matches!(e, TransportError::Timeout),
        message: format!("{url}: {e}"),
    })?;
    match resp.status {
        200 => {}
        404 => return Err(IngestError::NotFound { study_id: study_id.to_string() }),
        status => {
            return Err(IngestError::Upstream {
                message: format!("{url}: HTTP {status}"),
                timed_out: false,
            })
        }
    }
    let parsed = parse_study_json(study_id, &resp.body);
    // a body that is not even JSON is not worth keeping
    if !matches!(parsed, Err(IngestError::Schema { ref path, .. }) if path == "$") {
        write_cached(cache_dir, study_id, endpoint, &resp.body)?;
    }
    parsed.map(|r| (r, Source::Network))
}

/// Parses an API v2 study document into its adverse-events section.
pub fn parse_study_json(study_id: &str, body: &[u8]) -> Result<RawStudyRecord> {
    let root: Value = serde_json::from_slice(body).map_err(|e| IngestError::Schema {
        path: "$".into(),
        message: format!("invalid JSON: {e}"),
    })?;
    if !root.is_object() {
        return Err(schema("$", "expected an object"));
    }

    let nct = str_field(&root, "protocolSection.identificationModule.nctId")?;
    if nct != study_id {
        return Err(schema(
            "protocolSection.identificationModule.nctId",
            &format!("record is for {nct}, requested {study_id}"),
        ));
    }

    let no_results = || IngestError::NoResults { study_id: study_id.to_string() };
    let module = root
        .get("resultsSection")
        .ok_or_else(no_results)?
        .get("adverseEventsModule")
        .ok_or_else(no_results)?;
    let base = "resultsSection.adverseEventsModule";

    let groups = array_at(module, base, "eventGroups")?.ok_or_else(|| {
        schema(&format!("{base}.eventGroups"), "missing field")
    })?;
    let mut arms = Vec::with_capacity(groups.len());
    for (i, group) in groups.iter().enumerate() {
        let path = format!("{base}.eventGroups[{i}]");
        let at_risk = match (
            opt_u32(group, &path, "seriousNumAtRisk")?,
            opt_u32(group, &path, "otherNumAtRisk")?,
        ) {
            (Some(a), Some(b)) if a != b => {
                return Err(IngestError::InconsistentAtRisk {
                    arm_id: str_field(group, "id").unwrap_or_default().to_string(),
                    first: a.min(b),
                    second: a.max(b),
                })
            }
            (a, b) => a.or(b),
        };
        arms.push(RawArm {
            id: req_str(group, &path, "id")?.to_string(),
            title: req_str(group, &path, "title")?.to_string(),
            at_risk,
        });
    }

    Ok(RawStudyRecord {
        study_id: study_id.to_string(),
        arms,
        serious_events: events(module, base, "seriousEvents")?,
        other_events: events(module, base, "otherEvents")?,
    })
}

fn events(module: &Value, base: &str, key: &str) -> Result<Vec<RawEvent>> {
    let Some(list) = array_at(module, base, key)? else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (i, event) in list.iter().enumerate() {
        let path = format!("{base}.{key}[{i}]");
        let term = req_str(event, &path, "term")?;
        let organ_system = event.get("organSystem").and_then(Value::as_str).map(str::to_string);
        let stats = array_at(event, &path, "stats")?
            .ok_or_else(|| schema(&format!("{path}.stats"), "missing field"))?;
        for (j, stat) in stats.iter().enumerate() {
            let spath = format!("{path}.stats[{j}]");
            let arm_id = req_str(stat, &spath, "groupId")?.to_string();
            let count = opt_u32(stat, &spath, "numAffected")?
                .ok_or_else(|| schema(&format!("{spath}.numAffected"), "missing field"))?;
            let at_risk = opt_u32(stat, &spath, "numAtRisk")?
                .ok_or_else(|| schema(&format!("{spath}.numAtRisk"), "missing field"))?;
            if at_risk == 0 {
                return Err(schema(&format!("{spath}.numAtRisk"), "must be positive"));
            }
            out.push(RawEvent {
                pt_name: term.to_string(),
                organ_system: organ_system.clone(),
                arm_id,
                count,
                at_risk,
            });
        }
    }
    Ok(out)
}

fn schema(path: &str, message: &str) -> IngestError {
    IngestError::Schema { path: path.to_string(), message: message.to_string() }
}

/// Walks a dotted path from the root, naming the first missing segment.
fn str_field<'a>(root: &'a Value, dotted: &str) -> Result<&'a str> {
    let mut cur = root;
    let mut walked = String::new();
    for seg in dotted.split('.') {
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(seg);
        cur = cur.get(seg).ok_or_else(|| schema(&walked, "missing field"))?;
    }
    cur.as_str().ok_or_else(|| schema(dotted, "expected a string"))
}

fn req_str<'a>(obj: &'a Value, path: &str, key: &str) -> Result<&'a str> {
    match obj.get(key) {
        None => Err(schema(&format!("{path}.{key}"), "missing field")),
        Some(v) => v.as_str().ok_or_else(|| schema(&format!("{path}.{key}"), "expected a string")),
    }
}

fn opt_u32(obj: &Value, path: &str, key: &str) -> Result<Option<u32>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .map(Some)
            .ok_or_else(|| schema(&format!("{path}.{key}"), "expected a non-negative integer")),
    }
}

fn array_at<'a>(obj: &'a Value, path: &str, key: &str) -> Result<Option<&'a Vec<Value>>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_array()
            .map(Some)
            .ok_or_else(|| schema(&format!("{path}.{key}"), "expected an array")),
    }
}
