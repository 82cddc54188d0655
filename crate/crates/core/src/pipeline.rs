//! The shared analysis pipeline used by both the CLI and the service.
//!
//! `analyze` turns an incidence table plus a resolved [`RunConfig`] into
//! [`ReviewArtifacts`]; the writers here produce the on-disk outputs.

use std::path::Path;

use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clustering::{
    self, label_clusters, pca_reduce, project_2d, ClusterLabeler, ClusterReport, ClusteringError,
    MedoidLabeler,
};
use crate::config::{ConfigError, RunConfig};
use crate::disproportionality::{self, ClusterSignal, DisproportionalityError, PtSignal};
use crate::fsutil::write_atomic;
use crate::ingest::{self, IncidenceTable, IngestError};
use crate::knowledge::{self, EmbeddingStore, KnowledgeError, TermEmbedding};
use crate::visuals::{self, ReviewArtifacts, VisualsError, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
    #[error(transparent)]
    Disproportionality(#[from] DisproportionalityError),
    #[error(transparent)]
    Visuals(#[from] VisualsError),
    #[error("embedding file {path}: {source}")]
    EmbeddingFile { path: String, source: KnowledgeError },
    #[error("table for {study_id:?} has no adverse-event rows")]
    EmptyTable { study_id: String },
    #[error("no population descriptors given (set analysis.descriptors)")]
    NoDescriptors,
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub const ARTIFACTS_FILE: &str = "artifacts.json";
pub const SIGNALS_FILE: &str = "signals.csv";
pub const CLUSTERS_FILE: &str = "clusters.csv";
pub const CLUSTER_REPORT_FILE: &str = "cluster_report.json";

/// Builds the embedding store selected by `config`: the embedding file when
/// one is set, otherwise the deterministic fallback encoder.
pub fn build_store(config: &RunConfig) -> Result<EmbeddingStore> {
    match &config.embedding_path {
        Some(path) => {
            let store = EmbeddingStore::load(path).map_err(|source| PipelineError::EmbeddingFile {
                path: path.display().to_string(),
                source,
            })?;
            Ok(store.with_unknown_term_policy(config.resolved_unknown_term_policy(), config.fallback_seed)?)
        }
        None => Ok(EmbeddingStore::fallback(config.embedding_dimension, config.fallback_seed)?),
    }
}

/// Runs the full pipeline with the default medoid labeler.
pub fn analyze(table: &IncidenceTable, store: &EmbeddingStore, config: &RunConfig) -> Result<ReviewArtifacts> {
    analyze_with_labeler(table, store, config, &MedoidLabeler)
}

pub fn analyze_with_labeler(
    table: &IncidenceTable,
    store: &EmbeddingStore,
    config: &RunConfig,
    labeler: &dyn ClusterLabeler,
) -> Result<ReviewArtifacts> {
    config.validate()?;
    if table.rows().is_empty() {
        return Err(PipelineError::EmptyTable { study_id: table.study_id().to_string() });
    }
    if config.descriptors.is_empty() {
        return Err(PipelineError::NoDescriptors);
    }
    let pts = table.pt_names();
    let embeddings = pts
        .iter()
        .map(|pt| {
            let mut e = store.resolve(pt)?;
            e.term = pt.to_string();
            Ok(e)
        })
        .collect::<std::result::Result<Vec<TermEmbedding>, KnowledgeError>>()?;

    let reduced = pca_reduce(&embeddings, config.components(), Some(config.max_components))?;
    let assignments = clustering::cluster(&reduced, &config.cluster);
    let labeling = label_clusters(&assignments, store, labeler)?;
    let coords = project_2d(&embeddings)?;

    let pt_signals = disproportionality::ebgm(table, &config.prior, &config.posterior)?;
    let cluster_signals = disproportionality::cluster_ebgm(&pt_signals, &labeling.assignments)?;

    let descriptors: Vec<&str> = config.descriptors.iter().map(String::as_str).collect();
    let expectedness = knowledge::expectedness(&descriptors, &pts, store)?;

    let map_points = visuals::build_map(table, &coords, &labeling.assignments, &config.map_style)?;
    let evd_points =
        visuals::build_evd(&pt_signals, &expectedness, &labeling.assignments, config.include_noise)?;
    let clusters = ClusterReport::from_labeling(&labeling);

    Ok(ReviewArtifacts {
        schema_version: SCHEMA_VERSION,
        study_id: table.study_id().to_string(),
        arms: table.arms().to_vec(),
        map_points,
        evd_points,
        cluster_signals,
        pt_signals,
        expectedness,
        ungrouped_terms: clusters.ungrouped_terms.clone(),
        clusters,
        config_snapshot: config.snapshot(),
    })
}

/// Content address of an analysis: SHA-256 over the canonical table CSV and
/// the config snapshot.
pub fn analysis_id(table: &IncidenceTable, config: &RunConfig) -> String {
    let canonical = json!({
        "table": ingest::to_csv_string(table),
        "config": config.snapshot(),
    });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    hex::encode(digest)
}

fn csv_line(fields: &[String]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(fields).expect("in-memory csv write");
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

/// Per-PT, per-arm signals: `pt_name,arm_id,n,at_risk,expected,ebgm,variance,weight,ci_low,ci_high`.
pub fn signals_csv(signals: &[PtSignal]) -> String {
    let mut out = String::from("pt_name,arm_id,n,at_risk,expected,ebgm,variance,weight,ci_low,ci_high\n");
    for s in signals {
        out.push_str(&csv_line(&[
            s.pt_name.clone(),
            s.arm_id.clone(),
            s.n.to_string(),
            s.at_risk.to_string(),
            s.expected.to_string(),
            s.ebgm.to_string(),
            s.variance.to_string(),
            s.weight.to_string(),
            s.ci_low.to_string(),
            s.ci_high.to_string(),
        ]));
    }
    out
}

/// Cluster-level signals: `cluster_id,label,arm_id,ebgm_cluster,member_count`.
pub fn clusters_csv(signals: &[ClusterSignal]) -> String {
    let mut out = String::from("cluster_id,label,arm_id,ebgm_cluster,member_count\n");
    for s in signals {
        out.push_str(&csv_line(&[
            s.cluster_id.to_string(),
            s.cluster_label.clone(),
            s.arm_id.clone(),
            s.ebgm_cluster.to_string(),
            s.member_count.to_string(),
        ]));
    }
    out
}

pub fn cluster_report_json(report: &ClusterReport) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(report).expect("cluster report serializes");
    bytes.push(b'\n');
    bytes
}

/// Writes artifacts JSON, both signal CSVs and the cluster report into `dir`.
pub fn write_outputs(artifacts: &ReviewArtifacts, dir: &Path) -> Result<()> {
    let files: [(&str, Vec<u8>); 4] = [
        (ARTIFACTS_FILE, artifacts.to_json()),
        (SIGNALS_FILE, signals_csv(&artifacts.pt_signals).into_bytes()),
        (CLUSTERS_FILE, clusters_csv(&artifacts.cluster_signals).into_bytes()),
        (CLUSTER_REPORT_FILE, cluster_report_json(&artifacts.clusters)),
    ];
    for (name, bytes) in files {
        let path = dir.join(name);
        write_atomic(&path, &bytes).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}
