//! `aesk`: batch entry point for the adverse-event review pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use aesk_core::config::RunConfig;
use aesk_core::fsutil::write_atomic;
use aesk_core::ingest::registry::{fetch_study_with_source, Source};
use aesk_core::ingest::{self, IncidenceTable, Lexicon, UreqTransport};
use aesk_core::pipeline;
use aesk_core::visuals::{self, PlotKind, ReviewArtifacts};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status for command-line usage errors.
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "aesk", version, about = "Adverse-event safety review: fetch, ingest, analyze, render, serve")]
#[command(after_help = "Settings resolve as flags > AESK_* environment variables > --config file > defaults.\n\
Every setting also has a dotted config-file key; the environment variable is\n\
AESK_ followed by the key uppercased with '.' replaced by '_' (prior.alpha -> AESK_PRIOR_ALPHA).")]
struct Cli {
    #[command(flatten)]
    settings: Settings,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Download study records into the cache (exit 0 all ok, 2 partial, 1 none)
    Fetch {
        /// NCT identifiers
        #[arg(required = true)]
        study_ids: Vec<String>,
    },
    /// Build the incidence table for a study and write it as CSV
    Ingest {
        study_id: String,
        /// Output file; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full analysis and write artifacts.json, signals.csv,
    /// clusters.csv and cluster_report.json
    Analyze {
        /// NCT identifier; omit when --csv is given
        study_id: Option<String>,
        /// Read the incidence table from a CSV file instead of the registry
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Render an SVG from an artifacts file
    Render {
        artifacts: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP review service
    Serve,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    /// Semantic map, one panel per arm
    Map,
    /// Expectedness vs disproportionality plot
    Evd,
}

impl From<Kind> for PlotKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Map => PlotKind::Map,
            Kind::Evd => PlotKind::Evd,
        }
    }
}

/// One flag per config key.
#[derive(Args, Debug, Default)]
struct Settings {
    /// TOML config file of dotted keys
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,

    /// [registry.endpoint] ClinicalTrials.gov API v2 base URL
    #[arg(long, global = true, value_name = "URL")]
    endpoint: Option<String>,
    /// [registry.cache_dir] directory holding cached study records
    #[arg(long, global = true, value_name = "DIR")]
    cache_dir: Option<String>,
    /// [registry.timeout_secs] registry request timeout in seconds
    #[arg(long, global = true, value_name = "SECS")]
    timeout_secs: Option<String>,
    /// [ingest.lexicon] file of valid MedDRA PTs, one per line
    #[arg(long, global = true, value_name = "FILE")]
    lexicon: Option<String>,
    /// [embedding.path] embedding file (term<TAB>v1 ... vD); fallback encoder when unset
    #[arg(long, global = true, value_name = "FILE")]
    embeddings: Option<String>,
    /// [embedding.dimension] fallback encoder dimension (>= 8)
    #[arg(long, global = true, value_name = "D")]
    embedding_dimension: Option<String>,
    /// [embedding.fallback_seed] fallback encoder hash seed
    #[arg(long, global = true, value_name = "SEED")]
    fallback_seed: Option<String>,
    /// [embedding.unknown_term_policy] error | fallback, for terms missing from the embedding file
    #[arg(long, global = true, value_name = "POLICY")]
    unknown_term_policy: Option<String>,
    /// [cluster.min_cluster_size] minimum points of a dense neighborhood and of a cluster
    #[arg(long, global = true, value_name = "N")]
    min_cluster_size: Option<String>,
    /// [cluster.epsilon] neighborhood radius, or "auto" for the k-distance elbow
    #[arg(long, global = true, value_name = "EPS")]
    epsilon: Option<String>,
    /// [pca.variance_target] explained-variance target in (0, 1]
    #[arg(long, global = true, value_name = "FRACTION")]
    pca_variance_target: Option<String>,
    /// [pca.max_components] cap on retained principal components
    #[arg(long, global = true, value_name = "K")]
    pca_max_components: Option<String>,
    /// [prior.alpha] gamma prior shape (> 0)
    #[arg(long, global = true, value_name = "ALPHA")]
    prior_alpha: Option<String>,
    /// [prior.beta] gamma prior rate (> 0)
    #[arg(long, global = true, value_name = "BETA")]
    prior_beta: Option<String>,
    /// [posterior.levels] lower,upper posterior quantile levels
    #[arg(long, global = true, value_name = "LOW,HIGH")]
    posterior_levels: Option<String>,
    /// [analysis.descriptors] population descriptor; repeat for several
    #[arg(long = "descriptor", global = true, value_name = "TEXT")]
    descriptors: Vec<String>,
    /// [visuals.include_noise] include ungrouped PTs in the EVD plot
    #[arg(long, global = true, value_name = "BOOL")]
    include_noise: Option<String>,
    /// [visuals.hide_zero_incidence] omit zero-incidence points from the map
    #[arg(long, global = true, value_name = "BOOL")]
    hide_zero_incidence: Option<String>,
    /// [visuals.r_min] minimum map point radius
    #[arg(long, global = true, value_name = "PX")]
    r_min: Option<String>,
    /// [visuals.r_max] maximum map point radius
    #[arg(long, global = true, value_name = "PX")]
    r_max: Option<String>,
    /// [service.bind] service bind address
    #[arg(long, global = true, value_name = "ADDR")]
    bind: Option<String>,
    /// [service.port] service port
    #[arg(long, global = true, value_name = "PORT")]
    port: Option<String>,
    /// [service.sync_threshold] largest PT count analysed synchronously
    #[arg(long, global = true, value_name = "N")]
    sync_threshold: Option<String>,
}

impl Settings {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out: Vec<(&'static str, String)> = [
            ("registry.endpoint", &self.endpoint),
            ("registry.cache_dir", &self.cache_dir),
            ("registry.timeout_secs", &self.timeout_secs),
            ("ingest.lexicon", &self.lexicon),
            ("embedding.path", &self.embeddings),
            ("embedding.dimension", &self.embedding_dimension),
            ("embedding.fallback_seed", &self.fallback_seed),
            ("embedding.unknown_term_policy", &self.unknown_term_policy),
            ("cluster.min_cluster_size", &self.min_cluster_size),
            ("cluster.epsilon", &self.epsilon),
            ("pca.variance_target", &self.pca_variance_target),
            ("pca.max_components", &self.pca_max_components),
            ("prior.alpha", &self.prior_alpha),
            ("prior.beta", &self.prior_beta),
            ("posterior.levels", &self.posterior_levels),
            ("visuals.include_noise", &self.include_noise),
            ("visuals.hide_zero_incidence", &self.hide_zero_incidence),
            ("visuals.r_min", &self.r_min),
            ("visuals.r_max", &self.r_max),
            ("service.bind", &self.bind),
            ("service.port", &self.port),
            ("service.sync_threshold", &self.sync_threshold),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.clone().map(|v| (k, v)))
        .collect();
        if !self.descriptors.is_empty() {
            out.push(("analysis.descriptors", self.descriptors.join(";")));
        }
        out
    }

    /// Defaults, then config file, then environment, then flags.
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path)?;
        }
        config.apply_env(|name| std::env::var(name).ok())?;
        for (key, value) in self.overrides() {
            config.set(key, &value).with_context(|| format!("flag for {key}"))?;
        }
        config.validate()?;
        Ok(config)
    }
}

fn transport(config: &RunConfig) -> UreqTransport {
    UreqTransport::new(Duration::from_secs(config.registry_timeout_secs))
}

fn load_lexicon(config: &RunConfig) -> Result<Option<Lexicon>> {
    config
        .lexicon
        .as_deref()
        .map(|p| Lexicon::load(p).with_context(|| format!("loading lexicon {}", p.display())))
        .transpose()
}

fn table_for(config: &RunConfig, study_id: &str) -> Result<IncidenceTable> {
    let record = ingest::fetch_study(study_id, &config.registry_endpoint, &config.cache_dir, &transport(config))
        .with_context(|| format!("fetching {study_id}"))?;
    let lexicon = load_lexicon(config)?;
    let merged = ingest::merge_serious_other(&record, lexicon.as_ref())?;
    if !merged.dropped_terms.is_empty() {
        eprintln!("{study_id}: dropped {} terms not in the lexicon: {}", merged.dropped_terms.len(), merged.dropped_terms.join("; "));
    }
    Ok(merged.table)
}

fn fetch(config: &RunConfig, ids: &[String]) -> ExitCode {
    let transport = transport(config);
    let mut ok = 0;
    for id in ids {
        match fetch_study_with_source(id, &config.registry_endpoint, &config.cache_dir, &transport) {
            Ok((record, source)) => {
                ok += 1;
                let from = match source {
                    Source::Cache => "cache",
                    Source::Network => "network",
                };
                println!("{id}\tok\t{from}\t{} arms", record.arms.len());
            }
            Err(e) => println!("{id}\terror\t{e}"),
        }
    }
    match ok {
        n if n == ids.len() => ExitCode::SUCCESS,
        0 => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn analyze(config: &RunConfig, study_id: Option<&str>, csv: Option<&Path>, out_dir: &Path) -> Result<()> {
    let table = match (study_id, csv) {
        (_, Some(path)) => ingest::load_csv(path).with_context(|| format!("reading {}", path.display()))?,
        (Some(id), None) => table_for(config, id)?,
        (None, None) => bail!("give a study id or --csv"),
    };
    let store = pipeline::build_store(config)?;
    let artifacts = pipeline::analyze(&table, &store, config)?;
    pipeline::write_outputs(&artifacts, out_dir)?;
    let report = &artifacts.clusters;
    println!(
        "{}: {} PTs, {} clusters, {} ungrouped; wrote {}",
        artifacts.study_id,
        table.rows().len(),
        report.clusters.len(),
        report.ungrouped_terms.len(),
        out_dir.display()
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn render(path: &Path, kind: Kind, out: &Path) -> Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let artifacts = ReviewArtifacts::from_json(&bytes).with_context(|| format!("loading {}", path.display()))?;
    visuals::render_svg(&artifacts, kind.into(), out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = cli.settings.resolve()?;
    match cli.command {
        Command::Fetch { study_ids } => return Ok(fetch(&config, &study_ids)),
        Command::Ingest { study_id, out } => {
            let csv = ingest::to_csv_string(&table_for(&config, &study_id)?);
            match out {
                Some(path) => write_atomic(&path, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
        Command::Analyze { study_id, csv, out_dir } => analyze(&config, study_id.as_deref(), csv.as_deref(), &out_dir)?,
        Command::Render { artifacts, kind, out } => render(&artifacts, kind, &out)?,
        Command::Serve => {
            let state = aesk_service::AppState::new(config.clone(), Arc::new(transport(&config)))?;
            tokio::runtime::Runtime::new()?.block_on(aesk_service::serve(Arc::new(state)))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.settings.verbose { tracing::Level::DEBUG } else { tracing::Level::WARN };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
