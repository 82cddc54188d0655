#![allow(dead_code)]

use std::path::{Path, PathBuf};

use aesk_core::clustering::ClusterAssignment;
use aesk_core::ingest::{
    fetch_study, merge_serious_other, Arm, HttpResponse, IncidenceTable, Transport, TransportError,
};
use aesk_core::knowledge::TermEmbedding;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const NARCOLEPSY: &str = "NCT02348593";
pub const DMD: &str = "NCT05096221";

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Fails any request; proves a code path stayed offline.
pub struct NoNetwork;

impl Transport for NoNetwork {
    fn get(&self, url: &str) -> Result<HttpResponse, TransportError> {
        panic!("unexpected network request to {url}");
    }
}

pub fn cached_table(cache_dir: &Path, study_id: &str) -> IncidenceTable {
    let record = fetch_study(study_id, "http://registry.invalid", cache_dir, &NoNetwork).unwrap();
    merge_serious_other(&record, None).unwrap().table
}

pub fn narcolepsy_table() -> IncidenceTable {
    cached_table(&fixtures().join("cache"), NARCOLEPSY)
}

/// Published per-arm counts in arm order placebo, 75 mg, 150 mg, 300 mg,
/// each arm with 59 subjects at risk.
pub const NARCOLEPSY_COUNTS: [(&str, [u32; 4]); 12] = [
    ("Insomnia", [0, 2, 0, 3]),
    ("Anxiety", [1, 1, 4, 5]),
    ("Headache", [3, 6, 14, 18]),
    ("Dizziness", [2, 2, 1, 3]),
    ("Decreased appetite", [1, 5, 5, 9]),
    ("Weight increased", [3, 2, 0, 1]),
    ("Weight decreased", [0, 1, 1, 3]),
    ("Heart rate increased", [0, 0, 0, 4]),
    ("Fatigue", [0, 0, 2, 3]),
    ("Nausea", [1, 3, 6, 6]),
    ("Dyspepsia", [0, 1, 2, 3]),
    ("Constipation", [1, 3, 1, 0]),
];

/// Small random table: 2..=5 arms, 1..=12 PTs, counts bounded by arm size.
pub fn random_table(rng: &mut ChaCha8Rng) -> IncidenceTable {
    let n_arms = rng.random_range(2..=5);
    let arms: Vec<Arm> = (0..n_arms)
        .map(|i| Arm {
            id: format!("EG{i:03}"),
            title: format!("Arm {i}"),
            n_at_risk: rng.random_range(1..=200),
        })
        .collect();
    let n_pts = rng.random_range(1..=12);
    let rows = (0..n_pts)
        .map(|p| {
            let counts = arms
                .iter()
                .map(|a| if rng.random_bool(0.2) { 0 } else { rng.random_range(0..=a.n_at_risk) })
                .collect();
            (format!("Term {p:02}"), counts)
        })
        .collect();
    IncidenceTable::from_counts("NCT00000000", arms, rows).unwrap()
}

/// Random partition of the table's PTs into clusters, with some noise.
pub fn random_assignments(table: &IncidenceTable, rng: &mut ChaCha8Rng) -> Vec<ClusterAssignment> {
    let k = rng.random_range(1..=3usize);
    let mut out: Vec<ClusterAssignment> = table
        .rows()
        .iter()
        .map(|r| {
            let id = if rng.random_bool(0.15) { None } else { Some(rng.random_range(0..k)) };
            ClusterAssignment {
                pt_name: r.pt_name.clone(),
                cluster_id: id,
                cluster_label: id.map(|i| format!("C{i}")).unwrap_or_default(),
            }
        })
        .collect();
    // keep ids contiguous
    let mut used: Vec<usize> = out.iter().filter_map(|a| a.cluster_id).collect();
    used.sort_unstable();
    used.dedup();
    for a in &mut out {
        if let Some(id) = a.cluster_id {
            let new = used.binary_search(&id).unwrap();
            a.cluster_id = Some(new);
            a.cluster_label = format!("C{new}");
        }
    }
    out
}

/// Direct evaluation of the shrinkage formulas, written independently of
/// the library: every quantity is recomputed from raw counts.
pub mod oracle {
    use aesk_core::clustering::ClusterAssignment;
    use aesk_core::ingest::IncidenceTable;

    #[derive(Debug, Clone, Copy)]
    pub struct Cell {
        pub expected: f64,
        pub ebgm: f64,
        pub variance: f64,
        pub weight: f64,
    }

    /// `cells[pt][arm]`.
    pub fn cells(table: &IncidenceTable, alpha: f64, beta: f64) -> Vec<Vec<Cell>> {
        table
            .rows()
            .iter()
            .map(|row| {
                let mut total_n = 0u64;
                let mut total_at_risk = 0u64;
                for c in &row.counts {
                    total_n += u64::from(c.n_affected);
                    total_at_risk += u64::from(c.n_at_risk);
                }
                row.counts
                    .iter()
                    .map(|c| {
                        let expected = c.n_at_risk as f64 * total_n as f64 / total_at_risk as f64;
                        let n = c.n_affected as f64;
                        let ebgm = (n + alpha) / (expected + beta);
                        let variance = ebgm * ebgm / (n + alpha);
                        Cell { expected, ebgm, variance, weight: 1.0 / variance }
                    })
                    .collect()
            })
            .collect()
    }

    /// Cluster EBGM per `(cluster id, arm index)`, ordered by id then arm.
    pub fn cluster_ebgm(
        table: &IncidenceTable,
        assignments: &[ClusterAssignment],
        alpha: f64,
        beta: f64,
    ) -> Vec<(usize, usize, f64)> {
        let cells = cells(table, alpha, beta);
        let max_id = assignments.iter().filter_map(|a| a.cluster_id).max();
        let mut out = Vec::new();
        let Some(max_id) = max_id else { return out };
        for id in 0..=max_id {
            for arm in 0..table.arms().len() {
                let mut num = 0.0;
                let mut den = 0.0;
                for (p, row) in table.rows().iter().enumerate() {
                    let member = assignments
                        .iter()
                        .any(|a| a.cluster_id == Some(id) && a.pt_name == row.pt_name);
                    if member {
                        num += cells[p][arm].weight * cells[p][arm].ebgm;
                        den += cells[p][arm].weight;
                    }
                }
                if den > 0.0 {
                    out.push((id, arm, num / den));
                }
            }
        }
        out
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Two Gaussian blobs (sigma 0.1, centers 10 apart) of `per_blob` points
/// plus one far outlier, in `dim` dimensions.
pub fn two_blobs_and_outlier(seed: u64, per_blob: usize, dim: usize) -> Vec<TermEmbedding> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut out = Vec::new();
    for (b, center) in [0.0, 10.0].into_iter().enumerate() {
        for i in 0..per_blob {
            let mut v: Vec<f64> = (0..dim).map(|_| 5.0 + noise.sample(&mut rng)).collect();
            v[0] += center;
            out.push(TermEmbedding::new(format!("blob{b} term{i:02}"), v).unwrap());
        }
    }
    let mut far = vec![5.0; dim];
    far[1] = 5.0 + 40.0;
    out.push(TermEmbedding::new("outlier", far).unwrap());
    out
}
