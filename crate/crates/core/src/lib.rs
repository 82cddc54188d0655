//! Adverse-event safety review engine.
//!
//! Aggregated adverse-event incidence tables (per Preferred Term and treatment
//! arm) are enriched with a semantic embedding layer. The crate groups PTs into
//! semantic clusters, computes shrinkage disproportionality (EBGM) at PT and
//! cluster level, scores how expected each PT is for the trial population, and
//! assembles the two review graphics: the 2-D semantic map and the
//! expectedness-versus-disproportionality (EVD) plot.
//!
//! The modules follow the data flow:
//!
//! * [`ingest`] reads registry records or CSV files into an [`ingest::IncidenceTable`].
//! * [`knowledge`] holds term embeddings and expectedness scoring.
//! * [`clustering`] reduces embeddings, clusters them and projects the map.
//! * [`disproportionality`] computes expected counts, EBGM and cluster EBGM.
//! * [`visuals`] builds map/EVD datasets and renders SVG.
//! * [`pipeline`] wires everything together behind a [`config::RunConfig`].

pub mod clustering;
pub mod config;
pub mod disproportionality;
pub mod fsutil;
pub mod ingest;
pub mod knowledge;
pub mod pipeline;
pub mod terms;
pub mod visuals;
