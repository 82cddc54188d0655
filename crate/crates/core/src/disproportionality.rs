//! Shrinkage disproportionality.
//!
//! For a PT with `n_i` affected subjects out of `N_i` at risk in arm `i`, the
//! expected count uses the trial's own pooled incidence as background:
//!
//! ```text
//! E_i    = N_i * (sum_i n_i) / (sum_i N_i)
//! EBGM_i = (n_i + alpha) / (E_i + beta)
//! ```
//!
//! With `n ~ Poisson(lambda * E)` and `lambda ~ Gamma(alpha, rate beta)` the
//! posterior is `Gamma(alpha + n, rate beta + E)`, whose mean is exactly the
//! point EBGM. Cluster EBGM is the inverse-variance weighted mean of member
//! EBGMs, with `Var_j = EBGM_j^2 / (n_j + alpha)` and weight `w_j = 1 / Var_j`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};
use thiserror::Error;

use crate::clustering::ClusterAssignment;
use crate::ingest::{IncidenceRow, IncidenceTable};
use crate::terms::canonical_key;

#[derive(Debug, Error, PartialEq)]
pub enum DisproportionalityError {
    #[error("prior parameters must be positive and finite (alpha={alpha}, beta={beta})")]
    InvalidPrior { alpha: f64, beta: f64 },
    #[error("posterior level {0} is outside (0, 1)")]
    InvalidLevel(f64),
    #[error("PT {0:?} is not in the incidence table")]
    UnknownPt(String),
    #[error("cluster {0} has no member signals")]
    EmptyCluster(usize),
    #[error("no signal for PT {pt_name:?} in arm {arm_id:?}")]
    MissingSignal { pt_name: String, arm_id: String },
}

pub type Result<T> = std::result::Result<T, DisproportionalityError>;

/// Gamma prior (shape `alpha`, rate `beta`) on the relative rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl PriorConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(alpha) && ok(beta) {
            Ok(Self { alpha, beta })
        } else {
            Err(DisproportionalityError::InvalidPrior { alpha, beta })
        }
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.alpha, self.beta).map(|_| ())
    }
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5 }
    }
}

/// Lower and upper posterior quantile levels reported per PT signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorLevels {
    pub low: f64,
    pub high: f64,
}

impl PosteriorLevels {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        check_level(low)?;
        check_level(high)?;
        if low >= high {
            return Err(DisproportionalityError::InvalidLevel(low));
        }
        Ok(Self { low, high })
    }
}

impl Default for PosteriorLevels {
    fn default() -> Self {
        Self { low: 0.05, high: 0.95 }
    }
}

fn check_level(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(DisproportionalityError::InvalidLevel(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtSignal {
    pub pt_name: String,
    pub arm_id: String,
    pub n: u32,
    pub at_risk: u32,
    pub expected: f64,
    pub ebgm: f64,
    pub variance: f64,
    pub weight: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// No events in any arm: `E = 0` and EBGM reduces to `alpha / beta`.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSignal {
    pub cluster_id: usize,
    pub cluster_label: String,
    pub arm_id: String,
    pub ebgm_cluster: f64,
    pub member_count: usize,
}

fn row_expected(row: &IncidenceRow) -> Vec<f64> {
    let total_n: f64 = row.counts.iter().map(|c| f64::from(c.n_affected)).sum();
    let total_at_risk: f64 = row.counts.iter().map(|c| f64::from(c.n_at_risk)).sum();
    if total_at_risk == 0.0 {
        return vec![0.0; row.counts.len()];
    }
    let pooled = total_n / total_at_risk;
    row.counts.iter().map(|c| f64::from(c.n_at_risk) * pooled).collect()
}

/// Per-arm expected counts of one PT, in arm order.
pub fn expected_counts(table: &IncidenceTable, pt: &str) -> Result<Vec<f64>> {
    table
        .row(pt)
        .map(row_expected)
        .ok_or_else(|| DisproportionalityError::UnknownPt(pt.to_string()))
}

pub fn point_ebgm(n: u32, expected: f64, prior: &PriorConfig) -> f64 {
    (f64::from(n) + prior.alpha) / (expected + prior.beta)
}

pub fn ebgm_variance(n: u32, ebgm: f64, prior: &PriorConfig) -> f64 {
    ebgm * ebgm / (f64::from(n) + prior.alpha)
}

/// Mean of the conjugate posterior `Gamma(alpha + n, rate beta + E)`.
pub fn posterior_mean(n: u32, expected: f64, prior: &PriorConfig) -> f64 {
    (prior.alpha + f64::from(n)) / (prior.beta + expected)
}

/// Quantiles of the relative-rate posterior `Gamma(alpha + n, rate beta + E)`.
pub fn posterior_interval(
    n: u32,
    expected: f64,
    prior: &PriorConfig,
    levels: &[f64],
) -> Result<Vec<f64>> {
    prior.validate()?;
    let shape = prior.alpha + f64::from(n);
    let rate = prior.beta + expected.max(0.0);
    levels
        .iter()
        .map(|&p| {
            check_level(p)?;
            Ok(gamma_quantile(shape, p) / rate)
        })
        .collect()
}

/// Inverse of the regularized lower incomplete gamma `P(shape, x) = p`
/// (unit rate), by safeguarded Newton iteration on a bracketing interval.
fn gamma_quantile(shape: f64, p: f64) -> f64 {
    let cdf = |x: f64| gamma_lr(shape, x);
    let ln_norm = ln_gamma(shape);
    let pdf = |x: f64| ((shape - 1.0) * x.ln() - x - ln_norm).exp();

    let mut lo = 0.0f64;
    let mut hi = shape.max(1.0);
    while cdf(hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = cdf(x) - p;
        if f == 0.0 {
            return x;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = pdf(x);
        let newton = x - f / d;
        let next = if d > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 1e-15 * x.max(f64::MIN_POSITIVE) || hi - lo <= 1e-15 * hi {
            return next;
        }
        x = next;
    }
    x
}

/// One signal per `(pt, arm)`, in table row order then arm order.
pub fn ebgm(
    table: &IncidenceTable,
    prior: &PriorConfig,
    levels: &PosteriorLevels,
) -> Result<Vec<PtSignal>> {
    prior.validate()?;
    PosteriorLevels::new(levels.low, levels.high)?;
    let mut out = Vec::with_capacity(table.rows().len() * table.arms().len());
    for row in table.rows() {
        let expected = row_expected(row);
        let degenerate = row.total_affected() == 0;
        for (count, e) in row.counts.iter().zip(expected) {
            let n = count.n_affected;
            let point = point_ebgm(n, e, prior);
            let variance = ebgm_variance(n, point, prior);
            let ci = posterior_interval(n, e, prior, &[levels.low, levels.high])?;
            out.push(PtSignal {
                pt_name: row.pt_name.clone(),
                arm_id: count.arm_id.clone(),
                n,
                at_risk: count.n_at_risk,
                expected: e,
                ebgm: point,
                variance,
                weight: 1.0 / variance,
                ci_low: ci[0],
                ci_high: ci[1],
                degenerate,
            });
        }
    }
    Ok(out)
}

/// Precision-weighted EBGM per `(cluster, arm)`. Noise PTs are ignored.
///
/// Output is ordered by cluster id, then by arm in order of first appearance
/// in `signals`.
pub fn cluster_ebgm(
    signals: &[PtSignal],
    assignments: &[ClusterAssignment],
) -> Result<Vec<ClusterSignal>> {
    let mut arms: Vec<&str> = Vec::new();
    let mut by_key: HashMap<(String, &str), &PtSignal> = HashMap::new();
    for s in signals {
        if !arms.contains(&s.arm_id.as_str()) {
            arms.push(&s.arm_id);
        }
        by_key.insert((canonical_key(&s.pt_name), s.arm_id.as_str()), s);
    }

    let mut clusters: BTreeMap<usize, (String, Vec<&str>)> = BTreeMap::new();
    for a in assignments {
        if let Some(id) = a.cluster_id {
            let entry = clusters
                .entry(id)
                .or_insert_with(|| (a.cluster_label.clone(), Vec::new()));
            entry.1.push(&a.pt_name);
        }
    }

    let mut out = Vec::new();
    for (cluster_id, (label, members)) in clusters {
        if members.is_empty() || arms.is_empty() {
            return Err(DisproportionalityError::EmptyCluster(cluster_id));
        }
        for &arm in &arms {
            let mut weighted = 0.0;
            let mut total_weight = 0.0;
            for &pt in &members {
                let s = by_key.get(&(canonical_key(pt), arm)).ok_or_else(|| {
                    DisproportionalityError::MissingSignal {
                        pt_name: pt.to_string(),
                        arm_id: arm.to_string(),
                    }
                })?;
                weighted += s.weight * s.ebgm;
                total_weight += s.weight;
            }
            out.push(ClusterSignal {
                cluster_id,
                cluster_label: label.clone(),
                arm_id: arm.to_string(),
                ebgm_cluster: weighted / total_weight,
                member_count: members.len(),
            });
        }
    }
    Ok(out)
}
