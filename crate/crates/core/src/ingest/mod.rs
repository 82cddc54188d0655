//! Aggregated adverse-event incidence tables.
//!
//! A table holds, for one study, the number of subjects with each Preferred
//! Term per treatment arm. Tables come either from a ClinicalTrials.gov record
//! ([`registry`]), where serious and other events are summed, or from a local
//! CSV file ([`csv`]).

pub mod csv;
pub mod registry;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::terms::{canonical_key, display_form};

pub use self::csv::{load_csv, read_csv, to_csv_string, write_csv};
pub use self::registry::{
    fetch_study, parse_study_json, HttpResponse, Transport, TransportError, UreqTransport,
    DEFAULT_ENDPOINT,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("study id {0:?} does not match the NCT########## pattern")]
    InvalidStudyId(String),
    #[error("study {study_id} not found in the registry")]
    NotFound { study_id: String },
    #[error("study {study_id} has no adverse-events results section")]
    NoResults { study_id: String },
    #[error("unexpected record shape at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("registry request failed: {message}")]
    Upstream { message: String, timed_out: bool },
    #[error("arm {arm_id} reported with two at-risk counts ({first} and {second})")]
    InconsistentAtRisk { arm_id: String, first: u32, second: u32 },
    #[error("{pt_name} / {arm_id}: {n_affected} affected exceeds {n_at_risk} at risk")]
    InvalidCount {
        pt_name: String,
        arm_id: String,
        n_affected: u32,
        n_at_risk: u32,
    },
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: duplicate row for PT {pt_name:?} and arm {arm_id:?}")]
    DuplicateRow {
        line: u64,
        pt_name: String,
        arm_id: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// A treatment arm with its number of subjects at risk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub id: String,
    pub title: String,
    pub n_at_risk: u32,
}

/// Subjects with one PT in one arm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmCount {
    pub arm_id: String,
    pub arm_title: String,
    pub n_affected: u32,
    pub n_at_risk: u32,
}

impl ArmCount {
    pub fn incidence(&self) -> f64 {
        f64::from(self.n_affected) / f64::from(self.n_at_risk)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncidenceRow {
    pub pt_name: String,
    pub counts: Vec<ArmCount>,
}

impl IncidenceRow {
    pub fn total_affected(&self) -> u64 {
        self.counts.iter().map(|c| u64::from(c.n_affected)).sum()
    }
}

/// Per-study incidence of subjects with AEs by PT and arm.
///
/// Invariants, checked on construction and deserialization: every row has
/// one count per arm in arm order, PT names are unique after
/// [`canonical_key`], and `n_affected <= n_at_risk` with `n_at_risk > 0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "UncheckedTable")]
pub struct IncidenceTable {
    study_id: String,
    arms: Vec<Arm>,
    rows: Vec<IncidenceRow>,
}

#[derive(Deserialize)]
struct UncheckedTable {
    study_id: String,
    arms: Vec<Arm>,
    rows: Vec<IncidenceRow>,
}

impl TryFrom<UncheckedTable> for IncidenceTable {
    type Error = IngestError;

    fn try_from(raw: UncheckedTable) -> Result<Self> {
        let mut affected = Vec::with_capacity(raw.rows.len());
        for row in raw.rows {
            if row.counts.len() != raw.arms.len() {
                return Err(IngestError::InvalidTable(format!(
                    "row {:?} has {} counts for {} arms",
                    row.pt_name,
                    row.counts.len(),
                    raw.arms.len()
                )));
            }
            for (count, arm) in row.counts.iter().zip(&raw.arms) {
                if count.arm_id != arm.id || count.n_at_risk != arm.n_at_risk {
                    return Err(IngestError::InvalidTable(format!(
                        "row {:?} disagrees with arm {:?}",
                        row.pt_name, arm.id
                    )));
                }
            }
            affected.push((row.pt_name, row.counts.iter().map(|c| c.n_affected).collect()));
        }
        IncidenceTable::from_counts(raw.study_id, raw.arms, affected)
    }
}

impl IncidenceTable {
    /// Builds a table from arms and `(pt_name, n_affected per arm)` rows.
    pub fn from_counts(
        study_id: impl Into<String>,
        arms: Vec<Arm>,
        rows: Vec<(String, Vec<u32>)>,
    ) -> Result<Self> {
        let mut arm_ids = HashSet::new();
        for arm in &arms {
            if arm.n_at_risk == 0 {
                return Err(IngestError::InvalidTable(format!(
                    "arm {:?} has no subjects at risk",
                    arm.id
                )));
            }
            if !arm_ids.insert(arm.id.as_str()) {
                return Err(IngestError::InvalidTable(format!("duplicate arm {:?}", arm.id)));
            }
        }
        let mut seen = HashSet::new();
        let mut checked = Vec::with_capacity(rows.len());
        for (pt, affected) in rows {
            let pt_name = display_form(&pt);
            if pt_name.is_empty() {
                return Err(IngestError::InvalidTable("empty PT name".into()));
            }
            if !seen.insert(canonical_key(&pt_name)) {
                return Err(IngestError::InvalidTable(format!("duplicate PT {pt_name:?}")));
            }
            if affected.len() != arms.len() {
                return Err(IngestError::InvalidTable(format!(
                    "row {pt_name:?} has {} counts for {} arms",
                    affected.len(),
                    arms.len()
                )));
            }
            let mut counts = Vec::with_capacity(arms.len());
            for (n_affected, arm) in affected.into_iter().zip(&arms) {
                if n_affected > arm.n_at_risk {
                    return Err(IngestError::InvalidCount {
                        pt_name,
                        arm_id: arm.id.clone(),
                        n_affected,
                        n_at_risk: arm.n_at_risk,
                    });
                }
                counts.push(ArmCount {
                    arm_id: arm.id.clone(),
                    arm_title: arm.title.clone(),
                    n_affected,
                    n_at_risk: arm.n_at_risk,
                });
            }
            checked.push(IncidenceRow { pt_name, counts });
        }
        Ok(Self {
            study_id: study_id.into(),
            arms,
            rows: checked,
        })
    }

    pub fn study_id(&self) -> &str {
        &self.study_id
    }

    pub fn arms(&self) -> &[Arm] {
        &self.arms
    }

    pub fn rows(&self) -> &[IncidenceRow] {
        &self.rows
    }

    pub fn pt_names(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.pt_name.as_str()).collect()
    }

    /// Case- and whitespace-insensitive row lookup.
    pub fn row(&self, pt_name: &str) -> Option<&IncidenceRow> {
        let key = canonical_key(pt_name);
        self.rows.iter().find(|r| canonical_key(&r.pt_name) == key)
    }

    pub fn arm_index(&self, arm_id: &str) -> Option<usize> {
        self.arms.iter().position(|a| a.id == arm_id)
    }

    /// Same table restricted to the given PTs (in table order).
    pub fn subset(&self, pts: &[&str]) -> Self {
        let keys: HashSet<String> = pts.iter().map(|p| canonical_key(p)).collect();
        Self {
            study_id: self.study_id.clone(),
            arms: self.arms.clone(),
            rows: self
                .rows
                .iter()
                .filter(|r| keys.contains(&canonical_key(&r.pt_name)))
                .cloned()
                .collect(),
        }
    }
}

/// One arm (event group) as listed in a registry record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawArm {
    pub id: String,
    pub title: String,
    /// Group-level at-risk count, when the record states one.
    pub at_risk: Option<u32>,
}

/// One `(pt, arm)` statistic from either the serious or the other events list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEvent {
    pub pt_name: String,
    pub organ_system: Option<String>,
    pub arm_id: String,
    pub count: u32,
    pub at_risk: u32,
}

/// Adverse-events section of a study record, before serious and other
/// events are combined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawStudyRecord {
    pub study_id: String,
    pub arms: Vec<RawArm>,
    pub serious_events: Vec<RawEvent>,
    pub other_events: Vec<RawEvent>,
}

/// Set of valid MedDRA PT names, one per line in the source file.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    keys: HashSet<String>,
}

impl Lexicon {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(text.lines().collect())
    }

    pub fn contains(&self, term: &str) -> bool {
        self.keys.contains(&canonical_key(term))
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

impl<'a> FromIterator<&'a str> for Lexicon {
    fn from_iter<I: IntoIterator<Item = &'a str>>(iter: I) -> Self {
        let keys = iter
            .into_iter()
            .filter(|l| !l.trim_start().starts_with('#'))
            .map(canonical_key)
            .filter(|k| !k.is_empty())
            .collect();
        Self { keys }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutcome {
    pub table: IncidenceTable,
    /// PTs removed because they are absent from the configured lexicon.
    pub dropped_terms: Vec<String>,
}

/// Combines serious and other events into one incidence table.
///
/// For each `(pt, arm)` the affected count is the serious count plus the
/// other count, so a subject listed under both is counted twice. Arms keep
/// their record order; rows are ordered by canonical PT key so the result
/// does not depend on which list a PT was first seen in.
pub fn merge_serious_other(
    record: &RawStudyRecord,
    lexicon: Option<&Lexicon>,
) -> Result<MergeOutcome> {
    let mut arm_order: Vec<(String, String)> = Vec::new();
    let mut at_risk: HashMap<String, u32> = HashMap::new();
    for arm in &record.arms {
        arm_order.push((arm.id.clone(), arm.title.clone()));
        if let Some(n) = arm.at_risk {
            at_risk.insert(arm.id.clone(), n);
        }
    }

    // canonical key -> (display variants, affected per arm id)
    let mut by_pt: BTreeMap<String, (BTreeSet<String>, HashMap<String, u32>)> = BTreeMap::new();
    let mut dropped = BTreeSet::new();

    for event in record.serious_events.iter().chain(&record.other_events) {
        if !arm_order.iter().any(|(id, _)| *id == event.arm_id) {
            arm_order.push((event.arm_id.clone(), event.arm_id.clone()));
        }
        match at_risk.get(&event.arm_id) {
            Some(&first) if first != event.at_risk => {
                return Err(IngestError::InconsistentAtRisk {
                    arm_id: event.arm_id.clone(),
                    first: first.min(event.at_risk),
                    second: first.max(event.at_risk),
                });
            }
            Some(_) => {}
            None => {
                at_risk.insert(event.arm_id.clone(), event.at_risk);
            }
        }

        let display = display_form(&event.pt_name);
        if lexicon.is_some_and(|lex| !lex.contains(&display)) {
            dropped.insert(display);
            continue;
        }
        let entry = by_pt.entry(canonical_key(&display)).or_default();
        entry.0.insert(display);
        *entry.1.entry(event.arm_id.clone()).or_insert(0) += event.count;
    }

    let mut arms = Vec::with_capacity(arm_order.len());
    for (id, title) in arm_order {
        let n_at_risk = *at_risk.get(&id).ok_or_else(|| IngestError::Schema {
            path: format!("arms[{id}]"),
            message: "no at-risk count for arm".into(),
        })?;
        arms.push(Arm { id, title, n_at_risk });
    }

    let rows = by_pt
        .into_values()
        .map(|(names, counts)| {
            // smallest display variant keeps the merge independent of list order
            let name = names.into_iter().next().unwrap_or_default();
            let per_arm = arms
                .iter()
                .map(|a| counts.get(&a.id).copied().unwrap_or(0))
                .collect();
            (name, per_arm)
        })
        .collect();

    Ok(MergeOutcome {
        table: IncidenceTable::from_counts(record.study_id.clone(), arms, rows)?,
        dropped_terms: dropped.into_iter().collect(),
    })
}
