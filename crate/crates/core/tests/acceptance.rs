//! Acceptance suite. Each test checks one exit criterion and prints a
//! single `PASS` or `FAIL` line for it; the process exits nonzero when any
//! criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use aesk_core::clustering::{self, pca_reduce, ClusterAssignment, ClusterParams, Components};
use aesk_core::config::RunConfig;
use aesk_core::disproportionality::{
    cluster_ebgm, ebgm, posterior_mean, ClusterSignal, PosteriorLevels, PriorConfig,
};
use aesk_core::ingest::IncidenceTable;
use aesk_core::knowledge::{cosine_slices, expectedness, EmbeddingStore};
use aesk_core::pipeline;
use aesk_core::visuals::{render_svg_string, PlotKind};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::Gamma;
use statrs::statistics::Distribution;

fn report(name: &str, outcome: Result<String, String>) -> bool {
    match outcome {
        Ok(detail) => {
            println!("PASS {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {name}: {detail}");
            false
        }
    }
}

fn main() {
    let criteria: [fn() -> bool; 7] = [
        ingestion_golden,
        formula_oracle_suite,
        hand_derived_spot_checks,
        dose_response_monotone,
        dmd_directional_reproduction,
        clustering_properties,
        expectedness_properties,
    ];
    let mut failed = 0;
    for criterion in criteria {
        let passed = std::panic::catch_unwind(criterion).unwrap_or_else(|_| {
            println!("FAIL criterion panicked");
            false
        });
        if !passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ingestion_golden() -> bool {
    let outcome = (|| {
        let start = Instant::now();
        let table = narcolepsy_table();
        let elapsed = start.elapsed();
        ensure(table.rows().len() == 12, || format!("{} rows, expected 12", table.rows().len()))?;
        let arm_ids: Vec<&str> = table.arms().iter().map(|a| a.id.as_str()).collect();
        ensure(arm_ids == ["EG000", "EG001", "EG002", "EG003"], || format!("arms {arm_ids:?}"))?;
        for (pt, expected) in NARCOLEPSY_COUNTS {
            let row = table.row(pt).ok_or_else(|| format!("missing row {pt}"))?;
            let got: Vec<(u32, u32)> = row.counts.iter().map(|c| (c.n_affected, c.n_at_risk)).collect();
            let want: Vec<(u32, u32)> = expected.iter().map(|&n| (n, 59)).collect();
            ensure(got == want, || format!("{pt}: got {got:?}, expected {want:?}"))?;
        }
        ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
        Ok(format!("12/12 rows exact in {elapsed:?}"))
    })();
    report("ingestion golden (cached NCT02348593)", outcome)
}

fn formula_oracle_suite() -> bool {
    let outcome = (|| {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
        let levels = PosteriorLevels::default();
        let mut checked = 0usize;
        for t in 0..1000 {
            let table = random_table(&mut rng);
            let alpha = rng.random_range(0.05..3.0);
            let beta = rng.random_range(0.05..3.0);
            let prior = PriorConfig::new(alpha, beta).map_err(|e| e.to_string())?;
            let signals = ebgm(&table, &prior, &levels).map_err(|e| e.to_string())?;
            let cells = oracle::cells(&table, alpha, beta);
            let n_arms = table.arms().len();
            for (p, row) in table.rows().iter().enumerate() {
                let mut sum_e = 0.0;
                for a in 0..n_arms {
                    let s = &signals[p * n_arms + a];
                    let o = cells[p][a];
                    for (what, got, want) in [
                        ("E", s.expected, o.expected),
                        ("EBGM", s.ebgm, o.ebgm),
                        ("Var", s.variance, o.variance),
                        ("w", s.weight, o.weight),
                    ] {
                        ensure(close(got, want, 1e-12), || {
                            format!("table {t} {} arm {a} {what}: {got} vs {want}", row.pt_name)
                        })?;
                    }
                    sum_e += s.expected;
                    checked += 1;
                }
                let sum_n = row.total_affected() as f64;
                ensure((sum_e - sum_n).abs() <= 1e-9, || {
                    format!("table {t} {}: sum E {sum_e} != sum n {sum_n}", row.pt_name)
                })?;
            }

            let assignments = random_assignments(&table, &mut rng);
            let got = cluster_ebgm(&signals, &assignments).map_err(|e| e.to_string())?;
            let want = oracle::cluster_ebgm(&table, &assignments, alpha, beta);
            ensure(got.len() == want.len(), || format!("table {t}: {} cluster rows vs {}", got.len(), want.len()))?;
            for (g, (id, arm, value)) in got.iter().zip(want) {
                ensure(g.cluster_id == id && g.arm_id == table.arms()[arm].id, || {
                    format!("table {t}: cluster row order differs")
                })?;
                ensure(close(g.ebgm_cluster, value, 1e-12), || {
                    format!("table {t} cluster {id} arm {arm}: {} vs {value}", g.ebgm_cluster)
                })?;
            }
        }
        let elapsed = start.elapsed();
        ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
        Ok(format!("1000 tables, {checked} cells, conservation held, {elapsed:?}"))
    })();
    report("formula oracle suite", outcome)
}

fn hand_derived_spot_checks() -> bool {
    let outcome = (|| {
        let table = narcolepsy_table();
        let prior = PriorConfig::default();
        let signals = ebgm(&table, &prior, &PosteriorLevels::default()).map_err(|e| e.to_string())?;
        let headache = signals
            .iter()
            .find(|s| s.pt_name == "Headache" && s.arm_id == "EG003")
            .ok_or("no Headache 300 mg signal")?;
        ensure((headache.expected - 10.25).abs() < 1e-12, || format!("E = {}", headache.expected))?;
        ensure((headache.ebgm - 18.5 / 10.75).abs() < 1e-12, || format!("EBGM = {}", headache.ebgm))?;
        ensure((headache.ebgm - 1.7209).abs() < 5e-5, || format!("EBGM = {}", headache.ebgm))?;

        // members (EBGM 2.0, n = 10) and (EBGM 1.0, n = 40) with alpha 0.5
        let two = two_member_cluster();
        ensure((two - 45.75 / 43.125).abs() < 1e-12, || format!("cluster EBGM = {two}"))?;
        ensure((two - 1.0609).abs() < 5e-5, || format!("cluster EBGM = {two}"))?;

        for s in &signals {
            let shape = prior.alpha + f64::from(s.n);
            let rate = prior.beta + s.expected;
            let gamma = Gamma::new(shape, rate).map_err(|e| e.to_string())?;
            for mean in [gamma.mean().unwrap(), posterior_mean(s.n, s.expected, &prior)] {
                ensure((mean - s.ebgm).abs() <= 1e-12 * s.ebgm.max(1.0), || {
                    format!("{} {}: posterior mean {mean} vs EBGM {}", s.pt_name, s.arm_id, s.ebgm)
                })?;
            }
        }
        Ok(format!("Headache 300 mg EBGM {:.4}, two-member cluster {two:.4}", headache.ebgm))
    })();
    report("hand-derived spot checks", outcome)
}

/// Builds the two-member example from counts: n = 10 with E chosen so that
/// EBGM = 2.0, and n = 40 with EBGM = 1.0.
fn two_member_cluster() -> f64 {
    use aesk_core::disproportionality::{ebgm_variance, point_ebgm, PtSignal};
    let prior = PriorConfig::default();
    let member = |pt: &str, n: u32, target: f64| {
        let expected = (f64::from(n) + prior.alpha) / target - prior.beta;
        let e = point_ebgm(n, expected, &prior);
        let variance = ebgm_variance(n, e, &prior);
        PtSignal {
            pt_name: pt.into(),
            arm_id: "A".into(),
            n,
            at_risk: 100,
            expected,
            ebgm: e,
            variance,
            weight: 1.0 / variance,
            ci_low: 0.0,
            ci_high: 0.0,
            degenerate: false,
        }
    };
    let signals = [member("P", 10, 2.0), member("Q", 40, 1.0)];
    let assign = |pt: &str| ClusterAssignment {
        pt_name: pt.into(),
        cluster_id: Some(0),
        cluster_label: "C0".into(),
    };
    cluster_ebgm(&signals, &[assign("P"), assign("Q")]).unwrap()[0].ebgm_cluster
}

fn dose_response_monotone() -> bool {
    let outcome = (|| {
        let table = narcolepsy_table();
        let prior = PriorConfig::default();
        let signals = ebgm(&table, &prior, &PosteriorLevels::default()).map_err(|e| e.to_string())?;
        let assignments: Vec<ClusterAssignment> = table
            .rows()
            .iter()
            .map(|r| ClusterAssignment {
                pt_name: r.pt_name.clone(),
                cluster_id: Some(0),
                cluster_label: "Stress response".into(),
            })
            .collect();
        let got = cluster_ebgm(&signals, &assignments).map_err(|e| e.to_string())?;
        let want = oracle::cluster_ebgm(&table, &assignments, prior.alpha, prior.beta);
        for (g, (_, _, w)) in got.iter().zip(&want) {
            ensure(close(g.ebgm_cluster, *w, 1e-12), || format!("{}: {} vs oracle {w}", g.arm_id, g.ebgm_cluster))?;
        }
        // arm order placebo, 75 mg, 150 mg, 300 mg
        let values: Vec<f64> = got.iter().map(|c| c.ebgm_cluster).collect();
        ensure(values.len() == 4, || format!("{} arms", values.len()))?;
        ensure(values.windows(2).all(|w| w[0] < w[1]), || format!("not increasing: {values:?}"))?;
        Ok(format!("placebo < 75 < 150 < 300 mg: {values:.4?}"))
    })();
    report("dose-response cluster EBGM", outcome)
}

const LIVER: [&str; 7] = [
    "Transaminases increased",
    "Hepatic enzyme increased",
    "Glutamate dehydrogenase increased",
    "Gamma-glutamyltransferase increased",
    "Blood bilirubin increased",
    "Liver injury",
    "Hepatotoxicity",
];
const GASTROINTESTINAL: [&str; 7] = [
    "Rotavirus infection",
    "Gastroenteritis viral",
    "Gastroenteritis",
    "Vomiting",
    "Nausea",
    "Diarrhoea",
    "Constipation",
];
const ABDOMINAL: [&str; 4] = ["Appendicitis", "Anal abscess", "Abdominal pain upper", "Abdominal pain"];

fn dmd_cache_dir() -> Option<PathBuf> {
    let mut dirs = vec![fixtures().join("cache")];
    if let Ok(dir) = std::env::var("AESK_CACHE_DIR") {
        dirs.insert(0, PathBuf::from(dir));
    }
    dirs.into_iter()
        .find(|d| aesk_core::ingest::registry::cache_path(d, DMD).is_file())
}

/// Groups the named PTs into clusters (ids in list order); others are noise.
fn grouped(table: &IncidenceTable, groups: &[(&str, &[&str])]) -> Vec<ClusterAssignment> {
    table
        .rows()
        .iter()
        .map(|r| {
            let hit = groups.iter().enumerate().find(|(_, (_, members))| {
                members.iter().any(|m| m.eq_ignore_ascii_case(&r.pt_name))
            });
            ClusterAssignment {
                pt_name: r.pt_name.clone(),
                cluster_id: hit.map(|(i, _)| i),
                cluster_label: hit.map(|(_, (l, _))| l.to_string()).unwrap_or_default(),
            }
        })
        .collect()
}

fn arm_part(title: &str) -> Option<(u8, bool)> {
    let t = title.to_ascii_lowercase();
    let part = if t.contains("part 1") {
        1
    } else if t.contains("part 2") {
        2
    } else {
        return None;
    };
    Some((part, t.contains("placebo")))
}

fn dmd_directional_reproduction() -> bool {
    let outcome = (|| {
        let dir = dmd_cache_dir().ok_or_else(|| {
            format!("no cached {DMD} record (looked in AESK_CACHE_DIR and tests/fixtures/cache); real trial data is required")
        })?;
        let table = cached_table(&dir, DMD);
        let prior = PriorConfig::default();
        let signals = ebgm(&table, &prior, &PosteriorLevels::default()).map_err(|e| e.to_string())?;
        let groups: [(&str, &[&str]); 3] =
            [("Liver damage", &LIVER), ("Gastrointestinal disturbance", &GASTROINTESTINAL), ("Abdominal pathology", &ABDOMINAL)];
        let assignments = grouped(&table, &groups);
        ensure(assignments.iter().any(|a| a.cluster_id == Some(0)), || "no liver PTs in table".into())?;
        let clusters = cluster_ebgm(&signals, &assignments).map_err(|e| e.to_string())?;
        let value = |cluster: usize, arm: &str| -> Option<f64> {
            clusters.iter().find(|c: &&ClusterSignal| c.cluster_id == cluster && c.arm_id == arm).map(|c| c.ebgm_cluster)
        };

        let mut parts: BTreeMap<u8, (Option<&str>, Option<&str>)> = BTreeMap::new();
        for arm in table.arms() {
            if let Some((part, placebo)) = arm_part(&arm.title) {
                let slot = parts.entry(part).or_default();
                if placebo {
                    slot.1 = Some(&arm.id);
                } else {
                    slot.0 = Some(&arm.id);
                }
            }
        }
        let mut details = Vec::new();
        for part in [1u8, 2] {
            let (Some(active), Some(placebo)) = parts.get(&part).copied().unwrap_or_default() else {
                return Err(format!("cannot identify part {part} active/placebo arms"));
            };
            let (a, p) = (value(0, active).unwrap(), value(0, placebo).unwrap());
            ensure(a > 1.0 && 1.0 > p, || format!("part {part} liver: active {a:.3}, placebo {p:.3}"))?;
            details.push(format!("part {part} liver {a:.2}/{p:.2}"));
            if part == 2 {
                let ratio = |c: usize| value(c, active).zip(value(c, placebo)).map(|(a, p)| a / p);
                let liver = ratio(0).unwrap();
                for c in 1..groups.len() {
                    if let Some(r) = ratio(c) {
                        ensure(liver > r, || format!("part 2: {} ratio {r:.3} >= liver {liver:.3}", groups[c].0))?;
                    }
                }
            }
        }
        Ok(details.join(", "))
    })();
    report("DMD liver cluster direction (NCT05096221)", outcome)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<aesk_core::knowledge::TermEmbedding> {
    (0..n)
        .map(|i| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            aesk_core::knowledge::TermEmbedding::new(format!("term {i:03}"), v).unwrap()
        })
        .collect()
}

fn narcolepsy_config() -> RunConfig {
    let mut config = RunConfig::default();
    config.descriptors = vec!["Narcolepsy".into(), "Excessive daytime sleepiness".into()];
    config
}

fn clustering_properties() -> bool {
    let outcome = (|| {
        // two blobs plus an outlier
        let points = two_blobs_and_outlier(7, 10, 6);
        let reduced = pca_reduce(&points, Components::Count(6), None).map_err(|e| e.to_string())?;
        let assignments = clustering::cluster(&reduced, &ClusterParams::default());
        let ids: BTreeSet<usize> = assignments.iter().filter_map(|a| a.cluster_id).collect();
        let noise: Vec<&str> = assignments.iter().filter(|a| a.is_noise()).map(|a| a.pt_name.as_str()).collect();
        ensure(ids.len() == 2 && noise == ["outlier"], || format!("clusters {ids:?}, noise {noise:?}"))?;
        for a in &assignments {
            if let Some(id) = a.cluster_id {
                let blob = if a.pt_name.starts_with("blob0") { 0 } else { 1 };
                let peer = assignments.iter().find(|b| b.pt_name.starts_with(&format!("blob{blob}"))).unwrap();
                ensure(peer.cluster_id == Some(id), || format!("{} split from its blob", a.pt_name))?;
            }
        }

        // partition on random inputs
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
        for trial in 0..50 {
            let n = rng.random_range(3..40);
            let pts = random_points(&mut rng, n, 5);
            let reduced = pca_reduce(&pts, Components::VarianceTarget(0.9), Some(10)).map_err(|e| e.to_string())?;
            let params = ClusterParams { min_cluster_size: rng.random_range(2..6), epsilon: None };
            let out = clustering::cluster(&reduced, &params);
            let names: BTreeSet<&str> = out.iter().map(|a| a.pt_name.as_str()).collect();
            ensure(out.len() == n && names.len() == n, || format!("trial {trial}: not a partition"))?;
            let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
            for a in &out {
                if let Some(id) = a.cluster_id {
                    *sizes.entry(id).or_default() += 1;
                }
            }
            ensure(sizes.keys().copied().eq(0..sizes.len()), || format!("trial {trial}: ids {sizes:?}"))?;
            ensure(sizes.values().all(|&s| s >= params.min_cluster_size), || format!("trial {trial}: undersized {sizes:?}"))?;
        }

        // full-rank PCA preserves pairwise distances
        for trial in 0..20 {
            let n = rng.random_range(8..20);
            let dim = rng.random_range(2..6);
            let pts = random_points(&mut rng, n, dim);
            let reduced = pca_reduce(&pts, Components::Count(dim), None).map_err(|e| e.to_string())?;
            for i in 0..n {
                for j in 0..i {
                    let orig = euclid(pts[i].vector(), pts[j].vector());
                    let red = euclid(&reduced.coords[i], &reduced.coords[j]);
                    ensure((orig - red).abs() <= 1e-9, || format!("trial {trial}: {orig} vs {red}"))?;
                }
            }
        }

        // determinism of artifacts and graphics
        let table = narcolepsy_table();
        let config = narcolepsy_config();
        let run = || -> Result<(Vec<u8>, String, String), String> {
            let store = pipeline::build_store(&config).map_err(|e| e.to_string())?;
            let art = pipeline::analyze(&table, &store, &config).map_err(|e| e.to_string())?;
            let map = render_svg_string(&art, PlotKind::Map).map_err(|e| e.to_string())?;
            let evd = render_svg_string(&art, PlotKind::Evd).map_err(|e| e.to_string())?;
            Ok((art.to_json(), map, evd))
        };
        let first = run()?;
        let second = run()?;
        ensure(first.0 == second.0, || "artifacts JSON differs between runs".into())?;
        ensure(first.1 == second.1 && first.2 == second.2, || "SVG differs between runs".into())?;
        Ok("2 clusters + 1 noise, partition, isometry 1e-9, byte-identical reruns".into())
    })();
    report("clustering properties and determinism", outcome)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn expectedness_properties() -> bool {
    let outcome = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
        for trial in 0..500 {
            let dim = rng.random_range(2..64);
            let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = rng.random_range(0.01..100.0);
            let ab = cosine_slices(&a, &b).map_err(|e| e.to_string())?;
            let ba = cosine_slices(&b, &a).map_err(|e| e.to_string())?;
            let scaled: Vec<f64> = a.iter().map(|x| x * k).collect();
            let kab = cosine_slices(&scaled, &b).map_err(|e| e.to_string())?;
            ensure((ab - ba).abs() <= 1e-12, || format!("trial {trial}: asymmetric {ab} {ba}"))?;
            ensure((ab - kab).abs() <= 1e-12, || format!("trial {trial}: scale {ab} {kab}"))?;
        }

        let store = EmbeddingStore::fallback(128, 0).map_err(|e| e.to_string())?;
        for pt in ["Headache", "Liver injury", "Gamma-glutamyltransferase increased"] {
            let s = expectedness(&[pt], &[pt], &store).map_err(|e| e.to_string())?;
            ensure((s[0].score - 1.0).abs() <= 1e-12, || format!("{pt}: self score {}", s[0].score))?;
        }

        let descriptors = ["Narcolepsy", "Excessive daytime sleepiness"];
        let pts: Vec<&str> = NARCOLEPSY_COUNTS.iter().map(|(p, _)| *p).collect();
        let base = expectedness(&descriptors, &pts, &store).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let mut perm = pts.clone();
            for i in (1..perm.len()).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let got = expectedness(&descriptors, &perm, &store).map_err(|e| e.to_string())?;
            for (pt, score) in perm.iter().zip(&got) {
                ensure(score.pt_name == *pt, || "output order does not follow input".into())?;
                let want = base.iter().find(|b| b.pt_name == *pt).unwrap().score;
                ensure(score.score == want, || format!("{pt}: {} vs {want}", score.score))?;
            }
        }
        Ok("symmetry and scale 1e-12, self score 1, permutation equivariant".into())
    })();
    report("expectedness properties", outcome)
}
