//! Semantic clustering of PT embeddings.
//!
//! Embeddings are reduced with PCA, grouped with density-based clustering
//! (DBSCAN semantics, so isolated terms stay ungrouped as noise), labeled by
//! a pluggable [`ClusterLabeler`], and projected to 2-D for the map.
//!
//! Every step is deterministic for a fixed term set: principal axes have a
//! fixed sign (largest-magnitude loading positive) and clustering visits
//! points in canonical term order.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge::{cosine, EmbeddingStore, KnowledgeError, TermEmbedding};
use crate::terms::canonical_key;

#[derive(Debug, Error, PartialEq)]
pub enum ClusteringError {
    #[error("degenerate input: embeddings have zero variance")]
    DegenerateInput,
    #[error("need at least {needed} terms, got {got}")]
    InsufficientTerms { needed: usize, got: usize },
    #[error("invalid component request: {0}")]
    InvalidComponents(String),
    #[error("embeddings have mixed dimensions")]
    DimensionMismatch,
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
}

pub type Result<T> = std::result::Result<T, ClusteringError>;

/// Singular values below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-10;

/// How many principal components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    Count(usize),
    /// Smallest count whose cumulative explained variance reaches the target.
    VarianceTarget(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedMatrix {
    pub terms: Vec<String>,
    pub coords: Vec<Vec<f64>>,
    pub explained_variance_ratio: Vec<f64>,
}

impl ReducedMatrix {
    pub fn components(&self) -> usize {
        self.explained_variance_ratio.len()
    }
}

/// All principal components of the centered data, sign-normalized.
struct PcaFit {
    /// n x r projections onto the principal axes, r = min(n, D).
    scores: DMatrix<f64>,
    ratios: Vec<f64>,
}

fn fit_pca(embeddings: &[TermEmbedding]) -> Result<PcaFit> {
    let n = embeddings.len();
    let d = embeddings.first().map_or(0, TermEmbedding::dimension);
    if embeddings.iter().any(|e| e.dimension() != d) {
        return Err(ClusteringError::DimensionMismatch);
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| embeddings[i].vector()[j]);
    let scale: f64 = x.iter().map(|v| v * v).sum();
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let total: f64 = x.iter().map(|v| v * v).sum();
    if !(total > 1e-20 * scale.max(f64::MIN_POSITIVE)) {
        return Err(ClusteringError::DegenerateInput);
    }

    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let sigma_max = svd.singular_values[order[0]];

    let r = order.len();
    let mut scores = DMatrix::zeros(n, r);
    let mut ratios = Vec::with_capacity(r);
    for (k, &idx) in order.iter().enumerate() {
        let sigma = svd.singular_values[idx];
        if sigma <= RANK_TOLERANCE * sigma_max {
            ratios.push(0.0);
            continue;
        }
        let mut axis = v_t.row(idx).transpose();
        let mut pivot = 0;
        for (j, v) in axis.iter().enumerate() {
            if v.abs() > axis[pivot].abs() {
                pivot = j;
            }
        }
        if axis[pivot] < 0.0 {
            axis.neg_mut();
        }
        scores.set_column(k, &(&x * axis));
        ratios.push(sigma * sigma / total);
    }
    Ok(PcaFit { scores, ratios })
}

/// Mean-centered projections onto the leading principal axes.
///
/// `max_components` caps a variance-target selection; an explicit count must
/// not exceed `min(D, count)`.
pub fn pca_reduce(
    embeddings: &[TermEmbedding],
    components: Components,
    max_components: Option<usize>,
) -> Result<ReducedMatrix> {
    if embeddings.len() < 2 {
        return Err(ClusteringError::InsufficientTerms { needed: 2, got: embeddings.len() });
    }
    let limit = embeddings.len().min(embeddings[0].dimension());
    let fit = fit_pca(embeddings)?;
    let k = match components {
        Components::Count(k) => {
            if k == 0 || k > limit {
                return Err(ClusteringError::InvalidComponents(format!(
                    "{k} components requested, allowed 1..={limit}"
                )));
            }
            k
        }
        Components::VarianceTarget(target) => {
            if !(target > 0.0 && target <= 1.0) {
                return Err(ClusteringError::InvalidComponents(format!(
                    "variance target {target} outside (0, 1]"
                )));
            }
            let mut cumulative = 0.0;
            let mut k = fit.ratios.len();
            for (i, r) in fit.ratios.iter().enumerate() {
                cumulative += r;
                if cumulative >= target - 1e-12 {
                    k = i + 1;
                    break;
                }
            }
            k.min(max_components.unwrap_or(usize::MAX).max(1)).min(limit)
        }
    };

    let coords = (0..embeddings.len())
        .map(|i| (0..k).map(|j| fit.scores[(i, j)]).collect())
        .collect();
    Ok(ReducedMatrix {
        terms: embeddings.iter().map(|e| e.term.clone()).collect(),
        coords,
        explained_variance_ratio: fit.ratios[..k].to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub min_cluster_size: usize,
    /// Neighborhood radius; chosen from the k-distance elbow when `None`.
    pub epsilon: Option<f64>,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { min_cluster_size: 3, epsilon: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub pt_name: String,
    /// `None` marks a noise (ungrouped) term.
    pub cluster_id: Option<usize>,
    /// Empty for noise terms.
    pub cluster_label: String,
}

impl ClusterAssignment {
    pub fn is_noise(&self) -> bool {
        self.cluster_id.is_none()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Radius at the elbow of the sorted k-nearest-neighbor distance curve.
///
/// The curve is rescaled to the unit square and the elbow is the point
/// farthest below the chord joining its ends.
pub fn auto_epsilon(points: &[Vec<f64>], k: usize) -> Option<f64> {
    let n = points.len();
    if k == 0 || n <= k {
        return None;
    }
    let mut kdist: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| distance(&points[i], &points[j]))
                .collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    kdist.sort_by(f64::total_cmp);
    let (first, last) = (kdist[0], kdist[n - 1]);
    if last - first <= 0.0 || n < 3 {
        return Some(last);
    }
    let mut best = 0;
    let mut best_gap = f64::NEG_INFINITY;
    for (i, &v) in kdist.iter().enumerate() {
        let x = i as f64 / (n - 1) as f64;
        let y = (v - first) / (last - first);
        let gap = x - y;
        if gap > best_gap {
            best_gap = gap;
            best = i;
        }
    }
    Some(kdist[best])
}

/// Density-based clustering with noise.
///
/// A point with at least `min_cluster_size` points (itself included) within
/// `epsilon` is a core point; clusters are the connected components of core
/// points plus their border points. Clusters that end up smaller than
/// `min_cluster_size` are dissolved into noise. Cluster ids are contiguous
/// from 0 in discovery order over canonically sorted terms; the output
/// follows the input term order.
pub fn cluster(reduced: &ReducedMatrix, params: &ClusterParams) -> Vec<ClusterAssignment> {
    let n = reduced.terms.len();
    let noise = || {
        reduced
            .terms
            .iter()
            .map(|t| ClusterAssignment {
                pt_name: t.clone(),
                cluster_id: None,
                cluster_label: String::new(),
            })
            .collect::<Vec<_>>()
    };
    let min_size = params.min_cluster_size.max(1);
    if n < 2 || min_size > n {
        return noise();
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_cached_key(|&i| (canonical_key(&reduced.terms[i]), i));
    let points: Vec<&[f64]> = order.iter().map(|&i| reduced.coords[i].as_slice()).collect();

    let eps = match params.epsilon {
        Some(e) => e,
        None => {
            let owned: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
            match auto_epsilon(&owned, (min_size - 1).max(1)) {
                Some(e) => e,
                None => return noise(),
            }
        }
    };
    if !(eps >= 0.0) {
        return noise();
    }

    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| distance(points[i], points[j]) <= eps).collect())
        .collect();

    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next_id = 0;
    for start in 0..n {
        if visited[start] || neighbors[start].len() < min_size {
            continue;
        }
        let id = next_id;
        next_id += 1;
        let mut stack = vec![start];
        visited[start] = true;
        label[start] = Some(id);
        while let Some(p) = stack.pop() {
            if neighbors[p].len() < min_size {
                continue;
            }
            for &q in &neighbors[p] {
                if label[q].is_none() {
                    label[q] = Some(id);
                }
                if !visited[q] && label[q] == Some(id) {
                    visited[q] = true;
                    stack.push(q);
                }
            }
        }
    }

    // dissolve undersized clusters, then renumber contiguously
    let mut sizes = vec![0usize; next_id];
    for id in label.iter().flatten() {
        sizes[*id] += 1;
    }
    let mut remap = vec![None; next_id];
    let mut kept = 0;
    for (id, &size) in sizes.iter().enumerate() {
        if size >= min_size {
            remap[id] = Some(kept);
            kept += 1;
        }
    }

    let mut out = noise();
    for (sorted_pos, &orig) in order.iter().enumerate() {
        out[orig].cluster_id = label[sorted_pos].and_then(|id| remap[id]);
    }
    out
}

#[derive(Debug, Error)]
#[error("labeler {labeler} failed: {message}")]
pub struct LabelerError {
    pub labeler: String,
    pub message: String,
}

/// Names a cluster from its members.
pub trait ClusterLabeler: Send + Sync {
    fn name(&self) -> &str;
    fn label(
        &self,
        cluster_id: usize,
        members: &[TermEmbedding],
    ) -> std::result::Result<String, LabelerError>;
}

/// Labels a cluster with its medoid PT.
#[derive(Debug, Clone, Copy, Default)]
pub struct MedoidLabeler;

impl ClusterLabeler for MedoidLabeler {
    fn name(&self) -> &str {
        "medoid"
    }

    fn label(&self, _id: usize, members: &[TermEmbedding]) -> std::result::Result<String, LabelerError> {
        medoid(members)
            .map(|i| members[i].term.clone())
            .ok_or_else(|| LabelerError { labeler: "medoid".into(), message: "empty cluster".into() })
    }
}

/// Member with the highest mean cosine to its co-members; ties go to the
/// lexicographically smallest term. A singleton is its own medoid.
pub fn medoid(members: &[TermEmbedding]) -> Option<usize> {
    if members.len() <= 1 {
        return (!members.is_empty()).then_some(0);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in members.iter().enumerate() {
        let sum: f64 = members
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, o)| cosine(m, o).unwrap_or(0.0))
            .sum();
        let mean = sum / (members.len() - 1) as f64;
        best = match best {
            None => Some((i, mean)),
            Some((b, bm)) => {
                if mean > bm || (mean == bm && m.term < members[b].term) {
                    Some((i, mean))
                } else {
                    Some((b, bm))
                }
            }
        };
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labeling {
    pub assignments: Vec<ClusterAssignment>,
    /// Medoid PT per cluster id.
    pub medoids: BTreeMap<usize, String>,
    pub warnings: Vec<String>,
}

/// Attaches labels without touching membership. When the labeler fails,
/// the medoid name is used and a warning recorded.
pub fn label_clusters(
    assignments: &[ClusterAssignment],
    store: &EmbeddingStore,
    labeler: &dyn ClusterLabeler,
) -> Result<Labeling> {
    let mut members: BTreeMap<usize, Vec<TermEmbedding>> = BTreeMap::new();
    for a in assignments {
        if let Some(id) = a.cluster_id {
            let mut e = store.resolve(&a.pt_name)?;
            e.term = a.pt_name.clone();
            members.entry(id).or_default().push(e);
        }
    }

    let mut labels = BTreeMap::new();
    let mut medoids = BTreeMap::new();
    let mut warnings = Vec::new();
    for (id, group) in &members {
        let med = group[medoid(group).expect("cluster has members")].term.clone();
        let label = match labeler.label(*id, group) {
            Ok(l) if !l.trim().is_empty() => l,
            Ok(_) => {
                warnings.push(format!("cluster {id}: {} returned an empty label; using medoid", labeler.name()));
                med.clone()
            }
            Err(e) => {
                warnings.push(format!("cluster {id}: {e}; using medoid"));
                med.clone()
            }
        };
        labels.insert(*id, label);
        medoids.insert(*id, med);
    }

    let assignments = assignments
        .iter()
        .map(|a| ClusterAssignment {
            pt_name: a.pt_name.clone(),
            cluster_id: a.cluster_id,
            cluster_label: a.cluster_id.map(|id| labels[&id].clone()).unwrap_or_default(),
        })
        .collect();
    Ok(Labeling { assignments, medoids, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapCoordinates {
    pub pt_name: String,
    pub x: f64,
    pub y: f64,
}

/// First two principal components, each axis scaled by its max absolute
/// value into `[-1, 1]`.
pub fn project_2d(embeddings: &[TermEmbedding]) -> Result<Vec<MapCoordinates>> {
    if embeddings.len() < 3 {
        return Err(ClusteringError::InsufficientTerms { needed: 3, got: embeddings.len() });
    }
    let fit = fit_pca(embeddings)?;
    let column = |j: usize| -> Vec<f64> {
        if j >= fit.scores.ncols() {
            return vec![0.0; embeddings.len()];
        }
        let col: Vec<f64> = fit.scores.column(j).iter().copied().collect();
        let max = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max == 0.0 {
            col
        } else {
            col.iter().map(|v| (v / max).clamp(-1.0, 1.0)).collect()
        }
    };
    let (xs, ys) = (column(0), column(1));
    Ok(embeddings
        .iter()
        .zip(xs.into_iter().zip(ys))
        .map(|(e, (x, y))| MapCoordinates { pt_name: e.term.clone(), x, y })
        .collect())
}

/// Cluster report: members, labels and medoids per cluster plus the
/// ungrouped terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub clusters: Vec<ClusterEntry>,
    pub ungrouped_terms: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub cluster_id: usize,
    pub label: String,
    pub medoid: String,
    pub members: Vec<String>,
}

impl ClusterReport {
    pub fn from_labeling(labeling: &Labeling) -> Self {
        let mut clusters: BTreeMap<usize, ClusterEntry> = BTreeMap::new();
        let mut ungrouped = Vec::new();
        for a in &labeling.assignments {
            match a.cluster_id {
                Some(id) => clusters
                    .entry(id)
                    .or_insert_with(|| ClusterEntry {
                        cluster_id: id,
                        label: a.cluster_label.clone(),
                        medoid: labeling.medoids.get(&id).cloned().unwrap_or_default(),
                        members: Vec::new(),
                    })
                    .members
                    .push(a.pt_name.clone()),
                None => ungrouped.push(a.pt_name.clone()),
            }
        }
        Self {
            clusters: clusters.into_values().collect(),
            ungrouped_terms: ungrouped,
            warnings: labeling.warnings.clone(),
        }
    }
}
