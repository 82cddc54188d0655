//! Term embeddings, similarity and indication expectedness.
//!
//! An [`EmbeddingStore`] maps canonical PT (or population descriptor) strings
//! to fixed-dimension vectors. Vectors come from a tab-separated file or, when
//! no file is available, from [`fallback_encode`], a deterministic hashed
//! character-trigram encoder that stands in for a trained model.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::terms::{canonical_key, display_form};

#[derive(Debug, Error, PartialEq)]
pub enum KnowledgeError {
    #[error("dimension mismatch: expected {expected}, found {found}{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    DimensionMismatch {
        expected: usize,
        found: usize,
        line: Option<usize>,
    },
    #[error("zero vector")]
    ZeroVector,
    #[error("non-finite vector component")]
    NonFinite,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("term {0:?} is not in the embedding store")]
    UnknownTerm(String),
    #[error("term is empty")]
    EmptyTerm,
    #[error("fallback encoder needs dimension >= 8, got {0}")]
    InvalidDimension(usize),
    #[error("at least one population descriptor is required")]
    NoDescriptors,
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, KnowledgeError>;

/// A term and its (finite, nonzero) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermEmbedding {
    pub term: String,
    vector: Vec<f64>,
}

impl TermEmbedding {
    pub fn new(term: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(KnowledgeError::NonFinite);
        }
        if vector.iter().all(|&v| v == 0.0) {
            return Err(KnowledgeError::ZeroVector);
        }
        Ok(Self { term: term.into(), vector })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dimension(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.vector)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ExternalFile,
    FallbackEncoder,
}

/// What to do with a term missing from an external store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnknownTermPolicy {
    #[default]
    Error,
    Fallback,
}

impl std::str::FromStr for UnknownTermPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "error" => Ok(Self::Error),
            "fallback" => Ok(Self::Fallback),
            other => Err(format!("unknown term policy {other:?} (expected error|fallback)")),
        }
    }
}

/// Immutable term → vector map.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dimension: usize,
    entries: HashMap<String, TermEmbedding>,
    provenance: Provenance,
    fallback_seed: Option<u64>,
}

impl EmbeddingStore {
    /// Store backed only by the fallback encoder.
    pub fn fallback(dimension: usize, seed: u64) -> Result<Self> {
        if dimension < 8 {
            return Err(KnowledgeError::InvalidDimension(dimension));
        }
        Ok(Self {
            dimension,
            entries: HashMap::new(),
            provenance: Provenance::FallbackEncoder,
            fallback_seed: Some(seed),
        })
    }

    pub fn from_embeddings(embeddings: Vec<TermEmbedding>) -> Result<Self> {
        let dimension = embeddings.first().map_or(0, TermEmbedding::dimension);
        let mut entries = HashMap::with_capacity(embeddings.len());
        for (i, e) in embeddings.into_iter().enumerate() {
            if e.dimension() != dimension {
                return Err(KnowledgeError::DimensionMismatch {
                    expected: dimension,
                    found: e.dimension(),
                    line: None,
                });
            }
            let key = canonical_key(&e.term);
            if key.is_empty() {
                return Err(KnowledgeError::EmptyTerm);
            }
            if entries.insert(key, e).is_some() {
                return Err(KnowledgeError::Parse {
                    line: i + 1,
                    message: "duplicate term".into(),
                });
            }
        }
        Ok(Self {
            dimension,
            entries,
            provenance: Provenance::ExternalFile,
            fallback_seed: None,
        })
    }

    /// Reads `term<TAB>v1 v2 ... vD` lines; `#` lines and blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| KnowledgeError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut dimension = None;
        let mut entries: HashMap<String, TermEmbedding> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let (term, values) = raw.split_once('\t').ok_or_else(|| KnowledgeError::Parse {
                line,
                message: "expected term<TAB>values".into(),
            })?;
            let term = display_form(term);
            if term.is_empty() {
                return Err(KnowledgeError::Parse { line, message: "empty term".into() });
            }
            let vector = values
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>().map_err(|_| KnowledgeError::Parse {
                        line,
                        message: format!("{v:?} is not a number"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let expected = *dimension.get_or_insert(vector.len());
            if vector.len() != expected {
                return Err(KnowledgeError::DimensionMismatch {
                    expected,
                    found: vector.len(),
                    line: Some(line),
                });
            }
            let embedding = TermEmbedding::new(term.clone(), vector).map_err(|e| {
                KnowledgeError::Parse { line, message: format!("{term:?}: {e}") }
            })?;
            let key = canonical_key(&term);
            if entries.contains_key(&key) {
                return Err(KnowledgeError::Parse {
                    line,
                    message: format!("term {term:?} repeated"),
                });
            }
            entries.insert(key, embedding);
        }
        Ok(Self {
            dimension: dimension.unwrap_or(0),
            entries,
            provenance: Provenance::ExternalFile,
            fallback_seed: None,
        })
    }

    /// Lets unknown terms of an external store be encoded by the fallback.
    pub fn with_unknown_term_policy(mut self, policy: UnknownTermPolicy, seed: u64) -> Result<Self> {
        match policy {
            UnknownTermPolicy::Error => {
                if self.provenance == Provenance::ExternalFile {
                    self.fallback_seed = None;
                }
            }
            UnknownTermPolicy::Fallback => {
                if self.dimension < 8 {
                    return Err(KnowledgeError::InvalidDimension(self.dimension));
                }
                self.fallback_seed = Some(seed);
            }
        }
        Ok(self)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, term: &str) -> Option<&TermEmbedding> {
        self.entries.get(&canonical_key(term))
    }

    /// Stored embedding, else the fallback encoding when enabled.
    pub fn resolve(&self, term: &str) -> Result<TermEmbedding> {
        if let Some(e) = self.get(term) {
            return Ok(e.clone());
        }
        match self.fallback_seed {
            Some(seed) => fallback_encode(term, self.dimension, seed),
            None => Err(KnowledgeError::UnknownTerm(term.to_string())),
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stand-in encoder.
///
/// Each word of the canonical term is padded as `<word>` and split into
/// character trigrams. Every trigram is hashed (FNV-1a over the seed and the
/// trigram bytes) into one of `dimension` buckets with a hash-derived sign,
/// and the accumulated vector is unit-normalized. Terms sharing stems share
/// trigrams and therefore point in similar directions.
pub fn fallback_encode(term: &str, dimension: usize, seed: u64) -> Result<TermEmbedding> {
    if dimension < 8 {
        return Err(KnowledgeError::InvalidDimension(dimension));
    }
    let key = canonical_key(term);
    if key.is_empty() {
        return Err(KnowledgeError::EmptyTerm);
    }
    let mut vector = vec![0.0f64; dimension];
    let mut buf = String::new();
    for word in key.split(' ') {
        let padded: Vec<char> = std::iter::once('<')
            .chain(word.chars())
            .chain(std::iter::once('>'))
            .collect();
        for tri in padded.windows(3) {
            buf.clear();
            buf.extend(tri);
            let h = fnv1a(seed, buf.as_bytes());
            let bucket = (h % dimension as u64) as usize;
            let sign = if splitmix64(h) >> 63 == 0 { 1.0 } else { -1.0 };
            vector[bucket] += sign;
        }
    }
    let n = norm(&vector);
    if n == 0.0 {
        return Err(KnowledgeError::ZeroVector);
    }
    vector.iter_mut().for_each(|v| *v /= n);
    TermEmbedding::new(display_form(term), vector)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of two raw vectors, clamped to `[-1, 1]`.
pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(KnowledgeError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
            line: None,
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(KnowledgeError::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine(a: &TermEmbedding, b: &TermEmbedding) -> Result<f64> {
    cosine_slices(a.vector(), b.vector())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectednessScore {
    pub pt_name: String,
    pub score: f64,
}

/// Unit-normalized mean of the (individually unit-normalized) descriptor
/// embeddings.
pub fn population_vector(descriptors: &[&str], store: &EmbeddingStore) -> Result<Vec<f64>> {
    if descriptors.is_empty() {
        return Err(KnowledgeError::NoDescriptors);
    }
    let mut acc = vec![0.0; store.dimension()];
    for d in descriptors {
        let e = store.resolve(d)?;
        if e.dimension() != acc.len() {
            return Err(KnowledgeError::DimensionMismatch {
                expected: acc.len(),
                found: e.dimension(),
                line: None,
            });
        }
        let n = e.norm();
        for (a, v) in acc.iter_mut().zip(e.vector()) {
            *a += v / n;
        }
    }
    let k = descriptors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    let n = norm(&acc);
    // opposite descriptors cancel up to rounding
    if n <= 1e-12 {
        return Err(KnowledgeError::ZeroVector);
    }
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Cosine between the population vector and each PT, in `pts` order.
pub fn expectedness(
    population_descriptors: &[&str],
    pts: &[&str],
    store: &EmbeddingStore,
) -> Result<Vec<ExpectednessScore>> {
    let population = population_vector(population_descriptors, store)?;
    pts.iter()
        .map(|pt| {
            let e = store.resolve(pt)?;
            Ok(ExpectednessScore {
                pt_name: pt.to_string(),
                score: cosine_slices(&population, e.vector())?,
            })
        })
        .collect()
}
