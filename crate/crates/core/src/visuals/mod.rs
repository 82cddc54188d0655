//! Review graphics: the semantic map and the expectedness-versus-
//! disproportionality (EVD) plot, as datasets and as standalone SVG.

mod svg;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clustering::{ClusterAssignment, ClusterReport, MapCoordinates};
use crate::disproportionality::{ClusterSignal, PtSignal};
use crate::fsutil::write_atomic;
use crate::ingest::{Arm, IncidenceTable};
use crate::knowledge::ExpectednessScore;
use crate::terms::canonical_key;

pub use svg::{format_number, render_svg_string};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VisualsError {
    #[error("inputs are keyed to different PT sets: {0}")]
    KeyMismatch(String),
    #[error("nothing to render for the {0} view")]
    EmptyDataset(&'static str),
    #[error("unsupported artifacts schema_version {found} (expected {expected})")]
    SchemaVersion { found: u64, expected: u32 },
    #[error("invalid artifacts: {0}")]
    InvalidArtifacts(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VisualsError>;

/// Point radius encoding for the map: `r_min + (r_max - r_min) * sqrt(p)`,
/// so the disc area grows linearly with incidence `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapStyle {
    pub r_min: f64,
    pub r_max: f64,
    pub hide_zero_incidence: bool,
}

impl Default for MapStyle {
    fn default() -> Self {
        Self { r_min: 2.0, r_max: 14.0, hide_zero_incidence: false }
    }
}

impl MapStyle {
    pub fn radius(&self, incidence: f64) -> f64 {
        self.r_min + (self.r_max - self.r_min) * incidence.clamp(0.0, 1.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub pt_name: String,
    pub x: f64,
    pub y: f64,
    pub arm_id: String,
    pub incidence: f64,
    pub radius: f64,
    pub cluster_id: Option<usize>,
    pub cluster_label: String,
    pub is_noise: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvdPoint {
    pub pt_name: String,
    pub arm_id: String,
    pub expectedness: f64,
    pub ebgm: f64,
    pub incidence: f64,
    pub cluster_id: Option<usize>,
    pub cluster_label: String,
}

/// Everything the renderers and the review UI need for one analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewArtifacts {
    pub schema_version: u32,
    pub study_id: String,
    pub arms: Vec<Arm>,
    pub map_points: Vec<MapPoint>,
    pub evd_points: Vec<EvdPoint>,
    pub cluster_signals: Vec<ClusterSignal>,
    pub pt_signals: Vec<PtSignal>,
    pub expectedness: Vec<ExpectednessScore>,
    pub clusters: ClusterReport,
    pub ungrouped_terms: Vec<String>,
    pub config_snapshot: BTreeMap<String, Value>,
}

impl ReviewArtifacts {
    /// Canonical JSON bytes; identical inputs give identical bytes.
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("artifacts serialize");
        out.push(b'\n');
        out
    }

    /// Parses artifacts, checking `schema_version` before anything else.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let value: Value = serde_json::from_slice(bytes)
            .map_err(|e| VisualsError::InvalidArtifacts(e.to_string()))?;
        let version = value
            .get("schema_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| VisualsError::InvalidArtifacts("missing schema_version".into()))?;
        if version != u64::from(SCHEMA_VERSION) {
            return Err(VisualsError::SchemaVersion { found: version, expected: SCHEMA_VERSION });
        }
        serde_json::from_value(value).map_err(|e| VisualsError::InvalidArtifacts(e.to_string()))
    }
}

fn key_set<'a, I: IntoIterator<Item = &'a str>>(names: I) -> HashSet<String> {
    names.into_iter().map(canonical_key).collect()
}

fn check_keys(what: &str, expected: &HashSet<String>, got: &HashSet<String>) -> Result<()> {
    if expected == got {
        return Ok(());
    }
    let mut missing: Vec<_> = expected.difference(got).cloned().collect();
    let mut extra: Vec<_> = got.difference(expected).cloned().collect();
    missing.sort();
    extra.sort();
    Err(VisualsError::KeyMismatch(format!("{what}: missing {missing:?}, unexpected {extra:?}")))
}

/// One map point per `(PT, arm)` in table order. With
/// `hide_zero_incidence`, zero-incidence points are left out.
pub fn build_map(
    table: &IncidenceTable,
    coords: &[MapCoordinates],
    assignments: &[ClusterAssignment],
    style: &MapStyle,
) -> Result<Vec<MapPoint>> {
    let pts = key_set(table.rows().iter().map(|r| r.pt_name.as_str()));
    check_keys("map coordinates", &pts, &key_set(coords.iter().map(|c| c.pt_name.as_str())))?;
    check_keys("cluster assignments", &pts, &key_set(assignments.iter().map(|a| a.pt_name.as_str())))?;

    let coord_of: HashMap<String, &MapCoordinates> =
        coords.iter().map(|c| (canonical_key(&c.pt_name), c)).collect();
    let cluster_of: HashMap<String, &ClusterAssignment> =
        assignments.iter().map(|a| (canonical_key(&a.pt_name), a)).collect();

    let mut out = Vec::new();
    for row in table.rows() {
        let key = canonical_key(&row.pt_name);
        let c = coord_of[&key];
        let a = cluster_of[&key];
        for count in &row.counts {
            let incidence = count.incidence();
            if style.hide_zero_incidence && count.n_affected == 0 {
                continue;
            }
            out.push(MapPoint {
                pt_name: row.pt_name.clone(),
                x: c.x,
                y: c.y,
                arm_id: count.arm_id.clone(),
                incidence,
                radius: style.radius(incidence),
                cluster_id: a.cluster_id,
                cluster_label: a.cluster_label.clone(),
                is_noise: a.is_noise(),
            });
        }
    }
    Ok(out)
}

/// Joins expectedness (x) with EBGM (y) per `(PT, arm)`. Noise PTs are
/// left out unless `include_noise`. Ordered by cluster id (noise last),
/// then PT, then arm order.
pub fn build_evd(
    signals: &[PtSignal],
    expectedness: &[ExpectednessScore],
    assignments: &[ClusterAssignment],
    include_noise: bool,
) -> Result<Vec<EvdPoint>> {
    let pts = key_set(signals.iter().map(|s| s.pt_name.as_str()));
    check_keys("expectedness scores", &pts, &key_set(expectedness.iter().map(|e| e.pt_name.as_str())))?;
    check_keys("cluster assignments", &pts, &key_set(assignments.iter().map(|a| a.pt_name.as_str())))?;

    let score_of: HashMap<String, f64> =
        expectedness.iter().map(|e| (canonical_key(&e.pt_name), e.score)).collect();
    let cluster_of: HashMap<String, &ClusterAssignment> =
        assignments.iter().map(|a| (canonical_key(&a.pt_name), a)).collect();
    let mut arm_rank: HashMap<&str, usize> = HashMap::new();
    for s in signals {
        let next = arm_rank.len();
        arm_rank.entry(&s.arm_id).or_insert(next);
    }

    let mut out: Vec<EvdPoint> = signals
        .iter()
        .filter_map(|s| {
            let key = canonical_key(&s.pt_name);
            let a = cluster_of[&key];
            if a.is_noise() && !include_noise {
                return None;
            }
            Some(EvdPoint {
                pt_name: s.pt_name.clone(),
                arm_id: s.arm_id.clone(),
                expectedness: score_of[&key],
                ebgm: s.ebgm,
                incidence: f64::from(s.n) / f64::from(s.at_risk),
                cluster_id: a.cluster_id,
                cluster_label: a.cluster_label.clone(),
            })
        })
        .collect();
    out.sort_by_cached_key(|p| {
        (
            p.cluster_id.map_or(usize::MAX, |c| c),
            canonical_key(&p.pt_name),
            arm_rank[p.arm_id.as_str()],
        )
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Map,
    Evd,
}

impl PlotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Map => "map",
            Self::Evd => "evd",
        }
    }
}

impl std::str::FromStr for PlotKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "map" => Ok(Self::Map),
            "evd" => Ok(Self::Evd),
            other => Err(format!("unknown plot kind {other:?} (expected map|evd)")),
        }
    }
}

/// Renders one view to `out`, written atomically.
pub fn render_svg(artifacts: &ReviewArtifacts, kind: PlotKind, out: &Path) -> Result<()> {
    let svg = render_svg_string(artifacts, kind)?;
    write_atomic(out, svg.as_bytes())?;
    Ok(())
}
