//! Exact cosine-similarity retrieval over corpus chunks.
//!
//! Scoring is exhaustive: every eligible entry is scored against the query
//! and the best `k` are returned, ordered by score descending with ties
//! broken by chunk id ascending.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, EmbeddingVector};
use crate::corpus::{Category, Corpus};
use crate::par;

pub const INDEX_SCHEMA_VERSION: u32 = 1;

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

/// Default retrieval depth per agent query.
pub const DEFAULT_K: usize = 4;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector: {0}")]
    ZeroVector(String),
    #[error("corpus has no chunks; chunk it before indexing")]
    EmptyCorpus,
    #[error("duplicate chunk id {0:?} in index")]
    DuplicateChunkId(String),
    #[error("embedding chunk {chunk_id}: {source}")]
    Backend {
        chunk_id: String,
        #[source]
        source: BackendError,
    },
    #[error("index file: {0}")]
    File(String),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    // adding +0.0 folds -0.0 into 0.0 so equal scores compare equal under total_cmp
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0) + 0.0
}

/// `(a . b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (l2_norm(a.values()), l2_norm(b.values()));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(IndexError::ZeroVector(format!("norms {na:e} and {nb:e}")));
    }
    Ok(cosine_from_parts(dot(a.values(), b.values()), na, nb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub category: Category,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Immutable embedding index. Entry norms are cached at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    norms: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PersistedIndex {
    schema_version: u32,
    dim: usize,
    entries: Vec<IndexEntry>,
}

impl VectorIndex {
    pub fn from_entries(entries: Vec<IndexEntry>) -> Result<Self, IndexError> {
        let dim = entries.first().map_or(0, |e| e.vector.dim());
        let mut seen = HashSet::new();
        let mut norms = Vec::with_capacity(entries.len());
        for e in &entries {
            if e.vector.dim() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    got: e.vector.dim(),
                });
            }
            if !seen.insert(e.chunk_id.as_str()) {
                return Err(IndexError::DuplicateChunkId(e.chunk_id.clone()));
            }
            let norm = l2_norm(e.vector.values());
            if norm < ZERO_NORM {
                return Err(IndexError::ZeroVector(format!("entry {}", e.chunk_id)));
            }
            norms.push(norm);
        }
        Ok(Self { dim, entries, norms })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn category_of(&self, chunk_id: &str) -> Option<Category> {
        self.entries.iter().find(|e| e.chunk_id == chunk_id).map(|e| e.category)
    }

    fn check_query(&self, query: &EmbeddingVector) -> Result<f64, IndexError> {
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let norm = l2_norm(query.values());
        if norm < ZERO_NORM {
            return Err(IndexError::ZeroVector("query".into()));
        }
        Ok(norm)
    }

    fn score(&self, i: usize, query: &EmbeddingVector, query_norm: f64) -> f64 {
        cosine_from_parts(dot(query.values(), self.entries[i].vector.values()), query_norm, self.norms[i])
    }

    fn eligible(&self, i: usize, filter: Option<Category>) -> bool {
        filter.map_or(true, |c| self.entries[i].category == c)
    }

    /// Best `k` eligible entries, scored on the calling thread.
    pub fn top_k_sequential(
        &self,
        query: &EmbeddingVector,
        k: usize,
        category_filter: Option<Category>,
    ) -> Result<Vec<RetrievalHit>, IndexError> {
        let qn = self.check_query(query)?;
        let scored = (0..self.entries.len())
            .filter(|&i| self.eligible(i, category_filter))
            .map(|i| (self.score(i, query, qn), i))
            .collect();
        Ok(self.select(scored, k))
    }

    /// Best `k` eligible entries, scored on the rayon pool.
    #[cfg(feature = "parallel")]
    pub fn top_k_parallel(
        &self,
        query: &EmbeddingVector,
        k: usize,
        category_filter: Option<Category>,
    ) -> Result<Vec<RetrievalHit>, IndexError> {
        use rayon::prelude::*;
        let qn = self.check_query(query)?;
        let scored = (0..self.entries.len())
            .into_par_iter()
            .filter(|&i| self.eligible(i, category_filter))
            .map(|i| (self.score(i, query, qn), i))
            .collect();
        Ok(self.select(scored, k))
    }

    /// Best `k` eligible entries; parallel when the `parallel` feature is on.
    pub fn top_k(
        &self,
        query: &EmbeddingVector,
        k: usize,
        category_filter: Option<Category>,
    ) -> Result<Vec<RetrievalHit>, IndexError> {
        #[cfg(feature = "parallel")]
        {
            self.top_k_parallel(query, k, category_filter)
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.top_k_sequential(query, k, category_filter)
        }
    }

    fn select(&self, mut scored: Vec<(f64, usize)>, k: usize) -> Vec<RetrievalHit> {
        let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0)
                .then_with(|| self.entries[a.1].chunk_id.cmp(&self.entries[b.1].chunk_id))
        };
        let k = k.min(scored.len());
        if k == 0 {
            return Vec::new();
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        scored
            .into_iter()
            .enumerate()
            .map(|(rank, (score, i))| RetrievalHit {
                chunk_id: self.entries[i].chunk_id.clone(),
                score,
                rank,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&PersistedIndex {
            schema_version: INDEX_SCHEMA_VERSION,
            dim: self.dim,
            entries: self.entries.clone(),
        })
        .expect("index serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, IndexError> {
        let p: PersistedIndex = serde_json::from_str(json).map_err(|e| IndexError::File(e.to_string()))?;
        if p.schema_version != INDEX_SCHEMA_VERSION {
            return Err(IndexError::File(format!("unsupported schema_version {}", p.schema_version)));
        }
        let index = Self::from_entries(p.entries)?;
        if !index.is_empty() && index.dim != p.dim {
            return Err(IndexError::File(format!(
                "header dim {} disagrees with entries ({})",
                p.dim, index.dim
            )));
        }
        Ok(index)
    }
}

/// Embeds every chunk of a chunked corpus.
pub fn build_index(corpus: &Corpus, backend: &dyn Backend) -> Result<VectorIndex, IndexError> {
    if corpus.chunks.is_empty() {
        return Err(IndexError::EmptyCorpus);
    }
    let texts: Vec<String> = corpus.chunks.iter().map(|c| c.text.clone()).collect();
    let vectors = backend.embed_batch(&texts).map_err(|e| {
        let chunk_id = match &e {
            BackendError::AtIndex { index, .. } => corpus.chunks[*index].chunk_id.clone(),
            _ => "<batch>".to_string(),
        };
        IndexError::Backend {
            chunk_id,
            source: e,
        }
    })?;
    let entries = corpus
        .chunks
        .iter()
        .zip(vectors)
        .map(|(c, vector)| IndexEntry {
            chunk_id: c.chunk_id.clone(),
            category: c.category,
            vector,
        })
        .collect();
    VectorIndex::from_entries(entries)
}

/// Scores a query against every entry; used by the parallel/sequential
/// benches and by callers that need the full ranking.
pub fn score_all(index: &VectorIndex, query: &EmbeddingVector) -> Result<Vec<f64>, IndexError> {
    let qn = index.check_query(query)?;
    let ids: Vec<usize> = (0..index.len()).collect();
    Ok(par::map_indexed(&ids, |_, &i| index.score(i, query, qn)))
}
