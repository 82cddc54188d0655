//! CSV form of an incidence table.
//!
//! Header `study_id,arm_id,arm_title,pt_name,n_affected,n_at_risk`, one line
//! per `(pt, arm)`. Canonical files list every arm for every PT, rows in table
//! order and arms in arm order; such files round-trip byte for byte.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use super::{Arm, IncidenceTable, IngestError, Result};
use crate::terms::{canonical_key, display_form};

pub const HEADER: [&str; 6] = [
    "study_id",
    "arm_id",
    "arm_title",
    "pt_name",
    "n_affected",
    "n_at_risk",
];

pub fn load_csv(path: &Path) -> Result<IncidenceTable> {
    let file = std::fs::File::open(path)?;
    read_csv(file)
}

pub fn read_csv<R: Read>(reader: R) -> Result<IncidenceTable> {
    let mut rdr = ::csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);

    let header = rdr.headers().map_err(|e| parse_err(1, e))?.clone();
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(IngestError::Parse {
            line: 1,
            message: format!("expected header {:?}", HEADER.join(",")),
        });
    }

    let mut study_id: Option<String> = None;
    let mut arms: Vec<Arm> = Vec::new();
    let mut arm_lookup: HashMap<String, usize> = HashMap::new();
    let mut pts: Vec<String> = Vec::new();
    let mut pt_lookup: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, usize), u32> = HashMap::new();
    let mut seen: HashSet<(usize, usize)> = HashSet::new();

    for result in rdr.records() {
        let record = result.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("").trim();

        let sid = field(0);
        match &study_id {
            None => study_id = Some(sid.to_string()),
            Some(s) if s != sid => {
                return Err(IngestError::Parse {
                    line,
                    message: format!("study_id {sid:?} differs from {s:?}"),
                })
            }
            Some(_) => {}
        }

        let arm_id = field(1);
        if arm_id.is_empty() {
            return Err(IngestError::Parse { line, message: "empty arm_id".into() });
        }
        let pt_name = display_form(field(3));
        if pt_name.is_empty() {
            return Err(IngestError::Parse { line, message: "empty pt_name".into() });
        }
        let n_affected = parse_count(field(4), "n_affected", line)?;
        let n_at_risk = parse_count(field(5), "n_at_risk", line)?;
        if n_at_risk == 0 {
            return Err(IngestError::Parse { line, message: "n_at_risk must be positive".into() });
        }
        if n_affected > n_at_risk {
            return Err(IngestError::Parse {
                line,
                message: format!("n_affected {n_affected} exceeds n_at_risk {n_at_risk}"),
            });
        }

        let arm_idx = match arm_lookup.get(arm_id) {
            Some(&i) => {
                if arms[i].n_at_risk != n_at_risk {
                    return Err(IngestError::InconsistentAtRisk {
                        arm_id: arm_id.to_string(),
                        first: arms[i].n_at_risk,
                        second: n_at_risk,
                    });
                }
                i
            }
            None => {
                arms.push(Arm {
                    id: arm_id.to_string(),
                    title: field(2).to_string(),
                    n_at_risk,
                });
                arm_lookup.insert(arm_id.to_string(), arms.len() - 1);
                arms.len() - 1
            }
        };

        let key = canonical_key(&pt_name);
        let pt_idx = *pt_lookup.entry(key).or_insert_with(|| {
            pts.push(pt_name.clone());
            pts.len() - 1
        });

        if !seen.insert((pt_idx, arm_idx)) {
            return Err(IngestError::DuplicateRow {
                line,
                pt_name,
                arm_id: arm_id.to_string(),
            });
        }
        cells.insert((pt_idx, arm_idx), n_affected);
    }

    let rows = pts
        .into_iter()
        .enumerate()
        .map(|(p, name)| {
            let counts = (0..arms.len())
                .map(|a| cells.get(&(p, a)).copied().unwrap_or(0))
                .collect();
            (name, counts)
        })
        .collect();
    IncidenceTable::from_counts(study_id.unwrap_or_default(), arms, rows)
}

pub fn write_csv<W: Write>(table: &IncidenceTable, writer: W) -> Result<()> {
    let mut wtr = ::csv::WriterBuilder::new()
        .terminator(::csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let io = |e: ::csv::Error| IngestError::Io(std::io::Error::other(e));
    wtr.write_record(HEADER).map_err(io)?;
    for row in table.rows() {
        for count in &row.counts {
            wtr.write_record([
                table.study_id(),
                &count.arm_id,
                &count.arm_title,
                &row.pt_name,
                &count.n_affected.to_string(),
                &count.n_at_risk.to_string(),
            ])
            .map_err(io)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn to_csv_string(table: &IncidenceTable) -> String {
    let mut buf = Vec::new();
    write_csv(table, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("csv output is UTF-8")
}

fn parse_count(raw: &str, name: &str, line: u64) -> Result<u32> {
    raw.parse().map_err(|_| IngestError::Parse {
        line,
        message: format!("{name} {raw:?} is not a non-negative integer"),
    })
}

fn parse_err(line: u64, e: impl std::fmt::Display) -> IngestError {
    IngestError::Parse { line, message: e.to_string() }
}
