//! Round-based deliberation between document-grounded agents.
//!
//! Each round, every active querying role (roster order, so RCA then SEA in
//! the shipped configuration) rewrites its query, retrieves from its own
//! document category, generates a grounded response and records a decision.
//! Rounds are tagged with a decision-making phase. The result is a
//! [`Transcript`].

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    self, check_scope, discussion_order, parse_decision, render_prompt, rewrite_query, summarize_history,
    AgentError, AgentRole, Decision, Phase, RoleId, TurnContext,
};
use crate::backend::{Backend, BackendError};
use crate::corpus::{Category, Corpus, CorpusError, DocumentChunk};
use crate::index::{build_index, IndexError, VectorIndex, DEFAULT_K};

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DiscussionError {
    #[error("invalid discussion config: {0}")]
    InvalidConfig(String),
    #[error("round {round_index} is outside 1..={total_rounds}")]
    OutOfRange { round_index: usize, total_rounds: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("building index: {0}")]
    Index(#[from] IndexError),
    #[error("round {round}, {role}: {source}")]
    Turn {
        round: usize,
        role: RoleId,
        #[source]
        source: TurnError,
    },
    #[error("all {0} rounds already completed")]
    Finished(usize),
}

#[derive(Debug, Error)]
pub enum TurnError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("index returned chunk {0} which is not in the corpus")]
    UnknownChunk(String),
}

impl DiscussionError {
    /// The backend failure underneath, if that is what went wrong.
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            DiscussionError::Turn {
                source: TurnError::Backend(e) | TurnError::Agent(AgentError::Backend(e)),
                ..
            } => Some(e),
            DiscussionError::Index(IndexError::Backend { source, .. }) => Some(source),
            _ => None,
        }
    }
}

/// A failed run, with whatever rounds completed before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct DiscussionFailure {
    #[source]
    pub error: DiscussionError,
    pub partial: Option<Transcript>,
}

impl From<DiscussionError> for DiscussionFailure {
    fn from(error: DiscussionError) -> Self {
        Self { error, partial: None }
    }
}

fn default_rounds() -> usize {
    10
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_window() -> usize {
    3
}
fn default_budget() -> usize {
    agents::DEFAULT_SUMMARY_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscussionConfig {
    #[serde(default)]
    pub task: String,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub early_stop: bool,
    #[serde(default = "default_window")]
    pub early_stop_window: usize,
    /// Recorded for provenance only.
    #[serde(default)]
    pub seed_note: String,
    #[serde(default = "default_budget")]
    pub prior_summary_budget: usize,
    #[serde(default)]
    pub temperature: f64,
}

impl Default for DiscussionConfig {
    /// Defaults with an empty task, which `validate` rejects.
    fn default() -> Self {
        Self::new("")
    }
}

impl DiscussionConfig {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            rounds: default_rounds(),
            k: default_k(),
            early_stop: false,
            early_stop_window: default_window(),
            seed_note: String::new(),
            prior_summary_budget: default_budget(),
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DiscussionError> {
        let bad = |m: String| Err(DiscussionError::InvalidConfig(m));
        if self.task.trim().is_empty() {
            return bad("task must not be empty".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.prior_summary_budget == 0 {
            return bad("prior_summary_budget must be positive".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.early_stop && (self.early_stop_window == 0 || self.early_stop_window > self.rounds) {
            return bad(format!(
                "early_stop_window must be within 1..={} (rounds), got {}",
                self.rounds, self.early_stop_window
            ));
        }
        Ok(())
    }
}

/// Phase of a round: the rounds split into three contiguous blocks
/// (Intelligence, Design, Choice) whose sizes differ by at most one, with
/// the larger blocks first. Ten rounds split 4/3/3.
pub fn phase_of_round(round_index: usize, total_rounds: usize) -> Result<Phase, DiscussionError> {
    if round_index == 0 || round_index > total_rounds {
        return Err(DiscussionError::OutOfRange {
            round_index,
            total_rounds,
        });
    }
    let base = total_rounds / 3;
    let extra = total_rounds % 3;
    let first = base + usize::from(extra > 0);
    let second = base + usize::from(extra > 1);
    Ok(if round_index <= first {
        Phase::Intelligence
    } else if round_index <= first + second {
        Phase::Design
    } else {
        Phase::Choice
    })
}

/// A retrieval hit with the chunk details needed to cite and re-score it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitedHit {
    pub chunk_id: String,
    pub doc_id: String,
    pub section_label: String,
    pub category: Category,
    pub score: f64,
    pub rank: usize,
    pub text: String,
}

impl CitedHit {
    /// Node id used in the conversation-document map.
    pub fn section_id(&self) -> String {
        format!("{}/{}", self.doc_id, self.section_label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub round_index: usize,
    pub phase: Phase,
    pub role_id: RoleId,
    pub query: String,
    /// The query rewrite came back empty and the previous query was reused.
    #[serde(default)]
    pub query_fallback: bool,
    pub hits: Vec<CitedHit>,
    pub response: String,
    pub decision: Decision,
    pub relevance_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub round_index: usize,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRef {
    pub manifest: String,
    pub content_hash: String,
    /// Every chunk id in the corpus, for validating relevance labels later.
    pub chunk_ids: Vec<String>,
}

impl CorpusRef {
    pub fn new(manifest: impl Into<String>, corpus: &Corpus) -> Self {
        Self {
            manifest: manifest.into(),
            content_hash: corpus.content_hash(),
            chunk_ids: corpus.chunks.iter().map(|c| c.chunk_id.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub schema_version: u32,
    pub config: DiscussionConfig,
    pub corpus_ref: CorpusRef,
    /// Turn order within every round.
    pub turn_order: Vec<RoleId>,
    pub rounds: Vec<Round>,
    pub completed_rounds: usize,
    pub stopped_early: bool,
    pub created_at: String,
}

impl Transcript {
    pub fn turns(&self) -> impl Iterator<Item = &Turn> {
        self.rounds.iter().flat_map(|r| r.turns.iter())
    }

    pub fn final_round(&self) -> Option<&Round> {
        self.rounds.last()
    }

    /// JSON with `created_at` blanked; equal inputs give equal bytes.
    pub fn canonical_json(&self) -> String {
        let mut copy = self.clone();
        copy.created_at = String::new();
        serde_json::to_string_pretty(&copy).expect("transcript serializes")
    }

    /// SHA-256 of [`Self::canonical_json`].
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }

    /// Parses and checks structural invariants.
    pub fn from_json(json: &str) -> Result<Self, String> {
        let t: Transcript = serde_json::from_str(json).map_err(|e| e.to_string())?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != TRANSCRIPT_SCHEMA_VERSION {
            return Err(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.completed_rounds != self.rounds.len() {
            return Err(format!(
                "completed_rounds {} disagrees with {} recorded rounds",
                self.completed_rounds,
                self.rounds.len()
            ));
        }
        if self.completed_rounds > self.config.rounds {
            return Err("more rounds recorded than configured".into());
        }
        if self.stopped_early && !self.config.early_stop {
            return Err("stopped_early set but early_stop disabled".into());
        }
        for (i, round) in self.rounds.iter().enumerate() {
            if round.round_index != i + 1 {
                return Err(format!("round {} recorded at position {}", round.round_index, i + 1));
            }
            let order: Vec<RoleId> = round.turns.iter().map(|t| t.role_id).collect();
            if order != self.turn_order {
                return Err(format!("round {} turn order {order:?} != {:?}", round.round_index, self.turn_order));
            }
            let phase = phase_of_round(round.round_index, self.config.rounds).map_err(|e| e.to_string())?;
            for t in &round.turns {
                if t.round_index != round.round_index || t.phase != phase {
                    return Err(format!("turn {}.{} has inconsistent round/phase", round.round_index, t.role_id));
                }
                if t.hits.len() != t.relevance_scores.len() {
                    return Err(format!("turn {}.{} hits/scores length mismatch", round.round_index, t.role_id));
                }
            }
        }
        Ok(())
    }
}

/// Mutable progress of one discussion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiscussionState {
    pub rounds: Vec<Round>,
    pub stopped_early: bool,
    last_query: BTreeMap<RoleId, String>,
}

impl DiscussionState {
    pub fn completed_rounds(&self) -> usize {
        self.rounds.len()
    }

    fn turns(&self) -> Vec<Turn> {
        self.rounds.iter().flat_map(|r| r.turns.iter().cloned()).collect()
    }
}

/// A configured discussion over a shared index and backend.
pub struct Discussion<'a> {
    config: &'a DiscussionConfig,
    roles: Vec<AgentRole>,
    chunks: HashMap<&'a str, &'a DocumentChunk>,
    index: &'a VectorIndex,
    backend: &'a dyn Backend,
    corpus_ref: CorpusRef,
}

impl<'a> Discussion<'a> {
    pub fn new(
        config: &'a DiscussionConfig,
        corpus: &'a Corpus,
        index: &'a VectorIndex,
        backend: &'a dyn Backend,
    ) -> Result<Self, DiscussionError> {
        Self::with_roles(config, agents::default_roles(), corpus, index, backend)
    }

    pub fn with_roles(
        config: &'a DiscussionConfig,
        roles: Vec<AgentRole>,
        corpus: &'a Corpus,
        index: &'a VectorIndex,
        backend: &'a dyn Backend,
    ) -> Result<Self, DiscussionError> {
        config.validate()?;
        if !corpus.is_chunked() {
            return Err(DiscussionError::InvalidConfig("corpus is not chunked".into()));
        }
        let order: Vec<AgentRole> = discussion_order(&roles).into_iter().cloned().collect();
        if order.is_empty() {
            return Err(DiscussionError::InvalidConfig("no active querying roles".into()));
        }
        let mut needed: Vec<Category> = order.iter().filter_map(AgentRole::category_filter).collect();
        needed.sort();
        needed.dedup();
        corpus.require_categories(&needed)?;
        Ok(Self {
            config,
            roles: order,
            chunks: corpus.chunks.iter().map(|c| (c.chunk_id.as_str(), c)).collect(),
            index,
            backend,
            corpus_ref: CorpusRef::new("", corpus),
        })
    }

    /// Records where the corpus came from.
    pub fn with_manifest(mut self, manifest: impl Into<String>) -> Self {
        self.corpus_ref.manifest = manifest.into();
        self
    }

    pub fn turn_order(&self) -> Vec<RoleId> {
        self.roles.iter().map(|r| r.role_id).collect()
    }

    /// Runs one round. On error `state` is left untouched.
    pub fn step_round(&self, state: &mut DiscussionState) -> Result<(), DiscussionError> {
        let round_index = state.completed_rounds() + 1;
        if round_index > self.config.rounds {
            return Err(DiscussionError::Finished(self.config.rounds));
        }
        let phase = phase_of_round(round_index, self.config.rounds)?;
        let history = state.turns();
        let prior_summary = summarize_history(&history, self.config.prior_summary_budget);
        let mut peer = history.last().map(|t| t.response.clone());
        let mut turns = Vec::with_capacity(self.roles.len());
        let mut queries = Vec::with_capacity(self.roles.len());

        for role in &self.roles {
            let ctx = TurnContext {
                task: self.config.task.clone(),
                round_index,
                phase,
                prior_summary: prior_summary.clone(),
                peer_last_response: peer.clone(),
            };
            let turn = self
                .take_turn(role, &ctx, state.last_query.get(&role.role_id).map(String::as_str))
                .map_err(|source| DiscussionError::Turn {
                    round: round_index,
                    role: role.role_id,
                    source,
                })?;
            peer = Some(turn.response.clone());
            queries.push((role.role_id, turn.query.clone()));
            turns.push(turn);
        }

        state.rounds.push(Round { round_index, turns });
        state.last_query.extend(queries);
        Ok(())
    }

    fn take_turn(&self, role: &AgentRole, ctx: &TurnContext, previous_query: Option<&str>) -> Result<Turn, TurnError> {
        let rewritten = rewrite_query(role, ctx, previous_query, self.backend, self.config.temperature)?;
        let query_vec = self.backend.embed_text(&rewritten.query)?;
        let hits = self.index.top_k(&query_vec, self.config.k, role.category_filter())?;
        let cited = hits
            .into_iter()
            .map(|h| {
                let chunk = self
                    .chunks
                    .get(h.chunk_id.as_str())
                    .ok_or_else(|| TurnError::UnknownChunk(h.chunk_id.clone()))?;
                Ok(CitedHit {
                    chunk_id: h.chunk_id,
                    doc_id: chunk.doc_id.clone(),
                    section_label: chunk.section_label.clone(),
                    category: chunk.category,
                    score: h.score,
                    rank: h.rank,
                    text: chunk.text.clone(),
                })
            })
            .collect::<Result<Vec<_>, TurnError>>()?;
        check_scope(role, &cited)?;
        let request = render_prompt(role, ctx, &cited, self.config.temperature);
        let response = self.backend.generate(&request)?.text;
        let decision = parse_decision(&response);
        if decision.parse_warning {
            log::warn!("round {} {}: no decision line, counting as Disagree", ctx.round_index, role.role_id);
        }
        Ok(Turn {
            round_index: ctx.round_index,
            phase: ctx.phase,
            role_id: role.role_id,
            query: rewritten.query,
            query_fallback: rewritten.fallback,
            relevance_scores: cited.iter().map(|h| h.score).collect(),
            hits: cited,
            response,
            decision,
        })
    }

    fn converged(&self, state: &DiscussionState) -> bool {
        let w = self.config.early_stop_window;
        self.config.early_stop
            && state.rounds.len() >= w
            && state.rounds[state.rounds.len() - w..]
                .iter()
                .all(|r| r.turns.iter().all(|t| t.decision.is_clean_agree()))
    }

    pub fn transcript(&self, state: &DiscussionState) -> Transcript {
        Transcript {
            schema_version: TRANSCRIPT_SCHEMA_VERSION,
            config: self.config.clone(),
            corpus_ref: self.corpus_ref.clone(),
            turn_order: self.turn_order(),
            rounds: state.rounds.clone(),
            completed_rounds: state.rounds.len(),
            stopped_early: state.stopped_early,
            created_at: chrono::Utc::now().to_rfc3339(),
        }
    }

    /// Runs every round, stopping early on sustained clean agreement when
    /// enabled. A failure after at least one round carries the partial transcript.
    pub fn run(&self) -> Result<Transcript, DiscussionFailure> {
        let mut state = DiscussionState::default();
        while state.completed_rounds() < self.config.rounds {
            if let Err(error) = self.step_round(&mut state) {
                let partial = (state.completed_rounds() > 0).then(|| self.transcript(&state));
                return Err(DiscussionFailure { error, partial });
            }
            if self.converged(&state) {
                state.stopped_early = true;
                break;
            }
        }
        Ok(self.transcript(&state))
    }
}

/// Builds the index and runs a full discussion with the default roster.
pub fn run_discussion(
    config: &DiscussionConfig,
    corpus: &Corpus,
    backend: &dyn Backend,
) -> Result<Transcript, DiscussionFailure> {
    config.validate()?;
    let index = build_index(corpus, backend).map_err(DiscussionError::from)?;
    Discussion::new(config, corpus, &index, backend)?.run()
}
