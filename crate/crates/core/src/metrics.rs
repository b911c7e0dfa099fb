//! Evaluation metrics computed from a [`Transcript`]:
//!
//! - relevance score distribution (retrieval scores and response grounding),
//! - agent agreement rate, per round and overall,
//! - the conversation-document mapping graph,
//! - the question/response semantic similarity matrix and per-round drift,
//! - retrieval precision, recall and F1 against labeled relevance sets.
//!
//! Every metric is a pure function of the transcript and, where embeddings
//! are needed, the backend.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Decision, DecisionValue, RoleId};
use crate::backend::{Backend, BackendError, EmbeddingVector};
use crate::discussion::Transcript;
use crate::index::{cosine_similarity, IndexError};
use crate::par;

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("transcript has no turns")]
    EmptyTranscript,
    #[error("decision list is empty")]
    EmptyDecisionList,
    #[error("question or response list is empty")]
    EmptyInputList,
    #[error("relevant set is empty")]
    EmptyRelevantSet,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Similarity(#[from] IndexError),
    #[error("metrics file: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceHistogram {
    pub bin_edges: Vec<f64>,
    pub counts_per_role: BTreeMap<RoleId, Vec<u64>>,
    pub clamp_warnings: u64,
}

impl RelevanceHistogram {
    pub fn bin_edges() -> Vec<f64> {
        (0..=HISTOGRAM_BINS).map(|i| i as f64 / HISTOGRAM_BINS as f64).collect()
    }

    /// Buckets scores per role. Bin `i` covers `[i/10, (i+1)/10)`; the last
    /// bin also takes 1.0. Out-of-range scores are clamped and counted.
    pub fn from_scores(scores: &BTreeMap<RoleId, Vec<f64>>) -> Self {
        let edges = Self::bin_edges();
        let mut clamp_warnings = 0;
        let counts_per_role = scores
            .iter()
            .map(|(&role, values)| {
                let mut counts = vec![0u64; HISTOGRAM_BINS];
                for &s in values {
                    if !(0.0..=1.0).contains(&s) {
                        clamp_warnings += 1;
                    }
                    let s = s.clamp(0.0, 1.0);
                    let bin = edges[1..HISTOGRAM_BINS].iter().filter(|&&e| s >= e).count();
                    counts[bin] += 1;
                }
                (role, counts)
            })
            .collect();
        Self {
            bin_edges: edges,
            counts_per_role,
            clamp_warnings,
        }
    }

    pub fn total(&self, role: RoleId) -> u64 {
        self.counts_per_role.get(&role).map_or(0, |c| c.iter().sum())
    }
}

fn require_turns(t: &Transcript) -> Result<(), MetricsError> {
    if t.turns().next().is_none() {
        return Err(MetricsError::EmptyTranscript);
    }
    Ok(())
}

/// Query-to-chunk retrieval scores per role, in turn order.
pub fn retrieval_scores(t: &Transcript) -> BTreeMap<RoleId, Vec<f64>> {
    let mut out: BTreeMap<RoleId, Vec<f64>> = BTreeMap::new();
    for turn in t.turns() {
        out.entry(turn.role_id).or_default().extend(&turn.relevance_scores);
    }
    out
}

/// Histogram of retrieval scores.
pub fn relevance_distribution(t: &Transcript) -> Result<RelevanceHistogram, MetricsError> {
    require_turns(t)?;
    Ok(RelevanceHistogram::from_scores(&retrieval_scores(t)))
}

/// Embeds each distinct text once.
fn embed_unique(texts: &[&str], backend: &dyn Backend) -> Result<BTreeMap<String, EmbeddingVector>, MetricsError> {
    let unique: Vec<String> = texts.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>().into_iter().collect();
    let vectors = backend.embed_batch(&unique)?;
    Ok(unique.into_iter().zip(vectors).collect())
}

/// Response-to-chunk similarity for every (turn, hit) pair, per role.
pub fn response_grounding_scores(
    t: &Transcript,
    backend: &dyn Backend,
) -> Result<BTreeMap<RoleId, Vec<f64>>, MetricsError> {
    let texts: Vec<&str> = t
        .turns()
        .flat_map(|turn| std::iter::once(turn.response.as_str()).chain(turn.hits.iter().map(|h| h.text.as_str())))
        .collect();
    let vectors = embed_unique(&texts, backend)?;
    let mut out: BTreeMap<RoleId, Vec<f64>> = BTreeMap::new();
    for turn in t.turns() {
        let scores = out.entry(turn.role_id).or_default();
        let response = &vectors[&turn.response];
        for hit in &turn.hits {
            scores.push(cosine_similarity(response, &vectors[&hit.text])?);
        }
    }
    Ok(out)
}

pub fn response_grounding_distribution(t: &Transcript, backend: &dyn Backend) -> Result<RelevanceHistogram, MetricsError> {
    require_turns(t)?;
    Ok(RelevanceHistogram::from_scores(&response_grounding_scores(t, backend)?))
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 { (v[mid - 1] + v[mid]) / 2.0 } else { v[mid] })
}

/// Agree decisions over all decisions. Fallback Disagrees count as Disagree.
pub fn agreement_rate(decisions: &[Decision]) -> Result<f64, MetricsError> {
    if decisions.is_empty() {
        return Err(MetricsError::EmptyDecisionList);
    }
    let agree = decisions.iter().filter(|d| d.value == DecisionValue::Agree).count();
    Ok(agree as f64 / decisions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAgreement {
    pub round_index: usize,
    pub agree_count: usize,
    pub total_count: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSeries {
    pub per_round: Vec<RoundAgreement>,
    pub overall_rate: f64,
    /// Decisions that fell back to Disagree because no decision line was found.
    pub parse_warnings: usize,
}

pub fn agreement_series(t: &Transcript) -> Result<AgreementSeries, MetricsError> {
    require_turns(t)?;
    let mut per_round = Vec::new();
    let (mut agree_total, mut total) = (0, 0);
    for round in &t.rounds {
        let decisions: Vec<Decision> = round.turns.iter().map(|x| x.decision).collect();
        if decisions.is_empty() {
            continue;
        }
        let agree_count = decisions.iter().filter(|d| d.value == DecisionValue::Agree).count();
        per_round.push(RoundAgreement {
            round_index: round.round_index,
            agree_count,
            total_count: decisions.len(),
            rate: agreement_rate(&decisions)?,
        });
        agree_total += agree_count;
        total += decisions.len();
    }
    Ok(AgreementSeries {
        per_round,
        overall_rate: agree_total as f64 / total as f64,
        parse_warnings: t.turns().filter(|x| x.decision.parse_warning).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    AgentNode,
    SectionNode,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GraphNode {
    pub kind: NodeKind,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MappingEdge {
    pub agent: RoleId,
    /// `<doc_id>/<section_label>`
    pub section: String,
    pub weight: u64,
}

/// Bipartite graph of agents and the document sections their turns cited.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<MappingEdge>,
}

pub fn conversation_document_map(t: &Transcript) -> MappingGraph {
    let mut nodes = BTreeSet::new();
    let mut weights: BTreeMap<(RoleId, String), u64> = BTreeMap::new();
    for turn in t.turns() {
        for hit in &turn.hits {
            let section = hit.section_id();
            nodes.insert(GraphNode {
                kind: NodeKind::AgentNode,
                id: turn.role_id.to_string(),
            });
            nodes.insert(GraphNode {
                kind: NodeKind::SectionNode,
                id: section.clone(),
            });
            *weights.entry((turn.role_id, section)).or_default() += 1;
        }
    }
    MappingGraph {
        nodes: nodes.into_iter().collect(),
        edges: weights
            .into_iter()
            .map(|((agent, section), weight)| MappingEdge { agent, section, weight })
            .collect(),
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Entry `(i, j)` is the cosine similarity of question `i` and response `j`.
pub fn semantic_similarity_matrix(
    questions: &[String],
    responses: &[String],
    backend: &dyn Backend,
) -> Result<SimilarityMatrix, MetricsError> {
    if questions.is_empty() || responses.is_empty() {
        return Err(MetricsError::EmptyInputList);
    }
    let q = backend.embed_batch(questions)?;
    let r = backend.embed_batch(responses)?;
    similarity_of_embeddings(&q, &r)
}

/// Pairwise cosine similarity of two embedded lists; rows run in parallel.
pub fn similarity_of_embeddings(q: &[EmbeddingVector], r: &[EmbeddingVector]) -> Result<SimilarityMatrix, MetricsError> {
    let rows = par::try_map_indexed(q, |_, qi| {
        r.iter().map(|rj| cosine_similarity(qi, rj)).collect::<Result<Vec<f64>, IndexError>>()
    })?;
    Ok(SimilarityMatrix {
        rows: q.len(),
        cols: r.len(),
        values: rows.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub questions: Vec<String>,
    pub responses: Vec<String>,
    pub matrix: SimilarityMatrix,
    /// Per round: one minus the mean similarity of each query to its own response.
    pub per_round_drift: Vec<f64>,
}

pub fn semantic_drift_series(t: &Transcript, backend: &dyn Backend) -> Result<DriftReport, MetricsError> {
    require_turns(t)?;
    let questions: Vec<String> = t.turns().map(|x| x.query.clone()).collect();
    let responses: Vec<String> = t.turns().map(|x| x.response.clone()).collect();
    let matrix = semantic_similarity_matrix(&questions, &responses, backend)?;
    let mut per_round_drift = Vec::with_capacity(t.rounds.len());
    let mut i = 0;
    for round in &t.rounds {
        let n = round.turns.len();
        if n == 0 {
            continue;
        }
        let mean = (i..i + n).map(|k| matrix.get(k, k)).sum::<f64>() / n as f64;
        per_round_drift.push(1.0 - mean);
        i += n;
    }
    Ok(DriftReport {
        questions,
        responses,
        matrix,
        per_round_drift,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set-based precision, recall and F1. Empty retrieval scores zero.
pub fn retrieval_prf(retrieved: &BTreeSet<String>, relevant: &BTreeSet<String>) -> Result<Prf, MetricsError> {
    if relevant.is_empty() {
        return Err(MetricsError::EmptyRelevantSet);
    }
    let hits = retrieved.intersection(relevant).count() as f64;
    let precision = if retrieved.is_empty() { 0.0 } else { hits / retrieved.len() as f64 };
    let recall = hits / relevant.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf { precision, recall, f1 })
}

/// Relevant chunk ids per role, as loaded from a labels file.
pub type RelevanceLabels = BTreeMap<RoleId, BTreeSet<String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub per_role: BTreeMap<RoleId, Prf>,
    /// Micro-averaged over the union of all roles' retrieved and relevant sets.
    pub overall: Option<Prf>,
    /// Label ids absent from the corpus; ignored.
    pub unknown_label_ids: Vec<String>,
}

/// Scores each labeled role's retrieved chunk set against its labels.
/// Label ids not present in the transcript's corpus are dropped and listed.
pub fn labeled_prf(t: &Transcript, labels: &RelevanceLabels) -> Result<PrfReport, MetricsError> {
    let known: BTreeSet<&str> = t.corpus_ref.chunk_ids.iter().map(String::as_str).collect();
    let mut unknown = BTreeSet::new();
    let mut per_role = BTreeMap::new();
    let (mut all_retrieved, mut all_relevant) = (BTreeSet::new(), BTreeSet::new());
    for (&role, ids) in labels {
        let relevant: BTreeSet<String> = ids
            .iter()
            .filter(|id| {
                let ok = known.contains(id.as_str());
                if !ok {
                    unknown.insert((*id).clone());
                }
                ok
            })
            .cloned()
            .collect();
        let retrieved: BTreeSet<String> = t
            .turns()
            .filter(|x| x.role_id == role)
            .flat_map(|x| x.hits.iter().map(|h| h.chunk_id.clone()))
            .collect();
        match retrieval_prf(&retrieved, &relevant) {
            Ok(prf) => {
                per_role.insert(role, prf);
                all_retrieved.extend(retrieved);
                all_relevant.extend(relevant);
            }
            Err(MetricsError::EmptyRelevantSet) => {
                log::warn!("labels for {role} name no known chunk; skipped");
            }
            Err(e) => return Err(e),
        }
    }
    if !unknown.is_empty() {
        log::warn!("{} label id(s) not in corpus: {:?}", unknown.len(), unknown);
    }
    let overall = if all_relevant.is_empty() {
        None
    } else {
        Some(retrieval_prf(&all_retrieved, &all_relevant)?)
    };
    Ok(PrfReport {
        per_role,
        overall,
        unknown_label_ids: unknown.into_iter().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMetrics {
    /// Query-to-chunk retrieval scores.
    pub retrieval: RelevanceHistogram,
    /// Response-to-chunk similarity; the default view of document grounding.
    pub response_grounding: RelevanceHistogram,
    pub median_response_grounding: BTreeMap<RoleId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub schema_version: u32,
    pub transcript_hash: String,
    pub relevance: RelevanceMetrics,
    pub agreement: AgreementSeries,
    pub mapping: MappingGraph,
    pub drift: DriftReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prf: Option<PrfReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub round: usize,
    pub agreement_rate: f64,
    pub drift: f64,
}

impl MetricsBundle {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(json: &str) -> Result<Self, MetricsError> {
        let b: MetricsBundle = serde_json::from_str(json).map_err(|e| MetricsError::Schema(e.to_string()))?;
        if b.schema_version != METRICS_SCHEMA_VERSION {
            return Err(MetricsError::Schema(format!("unsupported schema_version {}", b.schema_version)));
        }
        Ok(b)
    }

    /// Plot-ready per-round agreement and drift.
    pub fn series_rows(&self) -> Vec<SeriesRow> {
        self.agreement
            .per_round
            .iter()
            .zip(&self.drift.per_round_drift)
            .map(|(a, &drift)| SeriesRow {
                round: a.round_index,
                agreement_rate: a.rate,
                drift,
            })
            .collect()
    }
}

/// Computes the full bundle; P/R/F1 only when labels are given.
pub fn compute_metrics(
    t: &Transcript,
    backend: &dyn Backend,
    labels: Option<&RelevanceLabels>,
) -> Result<MetricsBundle, MetricsError> {
    require_turns(t)?;
    let grounding = response_grounding_scores(t, backend)?;
    let median_response_grounding = grounding
        .iter()
        .filter_map(|(&role, scores)| median(scores).map(|m| (role, m)))
        .collect();
    Ok(MetricsBundle {
        schema_version: METRICS_SCHEMA_VERSION,
        transcript_hash: t.content_hash(),
        relevance: RelevanceMetrics {
            retrieval: relevance_distribution(t)?,
            response_grounding: RelevanceHistogram::from_scores(&grounding),
            median_response_grounding,
        },
        agreement: agreement_series(t)?,
        mapping: conversation_document_map(t),
        drift: semantic_drift_series(t, backend)?,
        prf: labels.map(|l| labeled_prf(t, l)).transpose()?,
    })
}
