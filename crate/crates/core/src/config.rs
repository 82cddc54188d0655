//! Run configuration.
//!
//! Every setting has a dotted key (`prior.alpha`, `cluster.min_cluster_size`,
//! ...). Values are layered: defaults, then a TOML config file using those
//! dotted keys, then `AESK_*` environment variables (`prior.alpha` →
//! `AESK_PRIOR_ALPHA`), then command-line flags. [`RunConfig::snapshot`]
//! is the analysis-relevant subset embedded in every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use thiserror::Error;

use crate::clustering::{ClusterParams, Components};
use crate::disproportionality::{PosteriorLevels, PriorConfig};
use crate::knowledge::UnknownTermPolicy;
use crate::visuals::MapStyle;

pub const ENV_PREFIX: &str = "AESK_";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {message}")]
    InvalidValue { key: String, message: String },
    #[error("config file {path}: {message}")]
    File { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Every recognized key with a one-line description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("registry.endpoint", "ClinicalTrials.gov API v2 base URL"),
    ("registry.cache_dir", "directory holding cached study records"),
    ("registry.timeout_secs", "registry request timeout in seconds"),
    ("ingest.lexicon", "optional file of valid MedDRA PTs, one per line"),
    ("embedding.path", "embedding file (term<TAB>v1 ... vD); fallback encoder when unset"),
    ("embedding.dimension", "fallback encoder dimension (>= 8)"),
    ("embedding.fallback_seed", "fallback encoder hash seed"),
    ("embedding.unknown_term_policy", "error | fallback, for terms missing from the embedding file"),
    ("cluster.min_cluster_size", "minimum points of a dense neighborhood and of a cluster"),
    ("cluster.epsilon", "neighborhood radius; k-distance elbow when unset"),
    ("pca.variance_target", "explained-variance target in (0, 1]"),
    ("pca.max_components", "cap on retained principal components"),
    ("prior.alpha", "gamma prior shape (> 0)"),
    ("prior.beta", "gamma prior rate (> 0)"),
    ("posterior.levels", "lower,upper posterior quantile levels"),
    ("analysis.descriptors", "population descriptors, ';'-separated"),
    ("visuals.include_noise", "include ungrouped PTs in the EVD plot"),
    ("visuals.hide_zero_incidence", "omit zero-incidence points from the map"),
    ("visuals.r_min", "minimum map point radius"),
    ("visuals.r_max", "maximum map point radius"),
    ("service.bind", "service bind address"),
    ("service.port", "service port"),
    ("service.sync_threshold", "largest PT count analysed synchronously"),
];

pub fn env_var_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "_"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub registry_endpoint: String,
    pub cache_dir: PathBuf,
    pub registry_timeout_secs: u64,
    pub lexicon: Option<PathBuf>,
    pub embedding_path: Option<PathBuf>,
    pub embedding_dimension: usize,
    pub fallback_seed: u64,
    pub unknown_term_policy: Option<UnknownTermPolicy>,
    pub cluster: ClusterParams,
    pub variance_target: f64,
    pub max_components: usize,
    pub prior: PriorConfig,
    pub posterior: PosteriorLevels,
    pub descriptors: Vec<String>,
    pub include_noise: bool,
    pub map_style: MapStyle,
    pub service_bind: String,
    pub service_port: u16,
    pub sync_threshold: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            registry_endpoint: crate::ingest::DEFAULT_ENDPOINT.to_string(),
            cache_dir: PathBuf::from(".aesk-cache"),
            registry_timeout_secs: 30,
            lexicon: None,
            embedding_path: None,
            embedding_dimension: 128,
            fallback_seed: 0,
            unknown_term_policy: None,
            cluster: ClusterParams::default(),
            variance_target: 0.9,
            max_components: 10,
            prior: PriorConfig::default(),
            posterior: PosteriorLevels::default(),
            descriptors: Vec::new(),
            include_noise: false,
            map_style: MapStyle::default(),
            service_bind: "127.0.0.1".to_string(),
            service_port: 8080,
            sync_threshold: 500,
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue { key: key.to_string(), message: message.into() }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| invalid(key, format!("cannot parse {value:?}")))
}

fn optional(value: &str) -> Option<&str> {
    let v = value.trim();
    (!v.is_empty() && v != "none").then_some(v)
}

impl RunConfig {
    /// Sets one key from its string form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "registry.endpoint" => self.registry_endpoint = value.trim().to_string(),
            "registry.cache_dir" => self.cache_dir = PathBuf::from(value.trim()),
            "registry.timeout_secs" => self.registry_timeout_secs = parse(key, value)?,
            "ingest.lexicon" => self.lexicon = optional(value).map(PathBuf::from),
            "embedding.path" => self.embedding_path = optional(value).map(PathBuf::from),
            "embedding.dimension" => self.embedding_dimension = parse(key, value)?,
            "embedding.fallback_seed" => self.fallback_seed = parse(key, value)?,
            "embedding.unknown_term_policy" => {
                self.unknown_term_policy =
                    Some(value.trim().parse().map_err(|e: String| invalid(key, e))?)
            }
            "cluster.min_cluster_size" => self.cluster.min_cluster_size = parse(key, value)?,
            "cluster.epsilon" => {
                self.cluster.epsilon = match optional(value) {
                    None | Some("auto") => None,
                    Some(v) => Some(parse(key, v)?),
                }
            }
            "pca.variance_target" => self.variance_target = parse(key, value)?,
            "pca.max_components" => self.max_components = parse(key, value)?,
            "prior.alpha" => self.prior.alpha = parse(key, value)?,
            "prior.beta" => self.prior.beta = parse(key, value)?,
            "posterior.levels" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 2 {
                    return Err(invalid(key, "expected two comma-separated levels"));
                }
                self.posterior.low = parse(key, parts[0])?;
                self.posterior.high = parse(key, parts[1])?;
            }
            "analysis.descriptors" => {
                self.descriptors = value
                    .split(';')
                    .map(str::trim)
                    .filter(|d| !d.is_empty())
                    .map(str::to_string)
                    .collect()
            }
            "visuals.include_noise" => self.include_noise = parse(key, value)?,
            "visuals.hide_zero_incidence" => self.map_style.hide_zero_incidence = parse(key, value)?,
            "visuals.r_min" => self.map_style.r_min = parse(key, value)?,
            "visuals.r_max" => self.map_style.r_max = parse(key, value)?,
            "service.bind" => self.service_bind = value.trim().to_string(),
            "service.port" => self.service_port = parse(key, value)?,
            "service.sync_threshold" => self.sync_threshold = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies a TOML document whose keys are the dotted config keys
    /// (either as `prior.alpha = 0.5` or inside `[prior]` tables).
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::File { path: String::new(), message: e.to_string() })?;
        let mut flat = Vec::new();
        flatten_toml("", &toml::Value::Table(table), &mut flat);
        for (key, value) in flat {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.apply_toml(&text).map_err(|e| match e {
            ConfigError::File { message, .. } => {
                ConfigError::File { path: path.display().to_string(), message }
            }
            other => other,
        })
    }

    /// Applies `AESK_*` variables for every known key.
    pub fn apply_env<F: Fn(&str) -> Option<String>>(&mut self, lookup: F) -> Result<()> {
        for (key, _) in KEYS {
            if let Some(v) = lookup(&env_var_name(key)) {
                self.set(key, &v)?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        PriorConfig::new(self.prior.alpha, self.prior.beta)
            .map_err(|e| invalid("prior", e.to_string()))?;
        PosteriorLevels::new(self.posterior.low, self.posterior.high)
            .map_err(|e| invalid("posterior.levels", e.to_string()))?;
        if !(self.variance_target > 0.0 && self.variance_target <= 1.0) {
            return Err(invalid("pca.variance_target", "must be in (0, 1]"));
        }
        if self.max_components == 0 {
            return Err(invalid("pca.max_components", "must be at least 1"));
        }
        if self.cluster.min_cluster_size == 0 {
            return Err(invalid("cluster.min_cluster_size", "must be at least 1"));
        }
        if let Some(eps) = self.cluster.epsilon {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(invalid("cluster.epsilon", "must be a positive number"));
            }
        }
        if self.embedding_path.is_none() && self.embedding_dimension < 8 {
            return Err(invalid("embedding.dimension", "fallback encoder needs at least 8"));
        }
        if !(self.map_style.r_min > 0.0 && self.map_style.r_min < self.map_style.r_max) {
            return Err(invalid("visuals.r_min", "need 0 < r_min < r_max"));
        }
        Ok(())
    }

    /// Policy in force: explicit setting, else `error` for an embedding file.
    pub fn resolved_unknown_term_policy(&self) -> UnknownTermPolicy {
        self.unknown_term_policy.unwrap_or(if self.embedding_path.is_some() {
            UnknownTermPolicy::Error
        } else {
            UnknownTermPolicy::Fallback
        })
    }

    pub fn components(&self) -> Components {
        Components::VarianceTarget(self.variance_target)
    }

    /// Keys that influence analysis output, as a sorted map.
    pub fn snapshot(&self) -> BTreeMap<String, Value> {
        let path = |p: &Option<PathBuf>| match p {
            Some(p) => Value::String(p.display().to_string()),
            None => Value::Null,
        };
        let policy = match self.resolved_unknown_term_policy() {
            UnknownTermPolicy::Error => "error",
            UnknownTermPolicy::Fallback => "fallback",
        };
        BTreeMap::from([
            ("analysis.descriptors".to_string(), json!(self.descriptors)),
            ("cluster.epsilon".to_string(), json!(self.cluster.epsilon)),
            ("cluster.min_cluster_size".to_string(), json!(self.cluster.min_cluster_size)),
            ("embedding.dimension".to_string(), json!(self.embedding_dimension)),
            ("embedding.fallback_seed".to_string(), json!(self.fallback_seed)),
            ("embedding.path".to_string(), path(&self.embedding_path)),
            ("embedding.unknown_term_policy".to_string(), json!(policy)),
            ("ingest.lexicon".to_string(), path(&self.lexicon)),
            ("pca.max_components".to_string(), json!(self.max_components)),
            ("pca.variance_target".to_string(), json!(self.variance_target)),
            ("posterior.levels".to_string(), json!([self.posterior.low, self.posterior.high])),
            ("prior.alpha".to_string(), json!(self.prior.alpha)),
            ("prior.beta".to_string(), json!(self.prior.beta)),
            ("visuals.hide_zero_incidence".to_string(), json!(self.map_style.hide_zero_incidence)),
            ("visuals.include_noise".to_string(), json!(self.include_noise)),
            ("visuals.r_max".to_string(), json!(self.map_style.r_max)),
            ("visuals.r_min".to_string(), json!(self.map_style.r_min)),
        ])
    }
}

fn flatten_toml(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_toml(&key, v, out);
            }
        }
        toml::Value::Array(items) => {
            let sep = if prefix == "analysis.descriptors" { ";" } else { "," };
            let joined = items
                .iter()
                .map(|i| match i {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(sep);
            out.push((prefix.to_string(), joined));
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
