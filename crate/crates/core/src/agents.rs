//! Agent roster, query rewriting, prompt rendering and decision extraction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, GenerationRequest};
use crate::corpus::Category;
use crate::discussion::{CitedHit, Turn};

/// Longest query handed to retrieval, in characters.
pub const MAX_QUERY_CHARS: usize = 512;

/// Default character budget for the rolling discussion digest.
pub const DEFAULT_SUMMARY_BUDGET: usize = 2000;

/// Marker placed in prompts when retrieval returned nothing.
pub const NO_DOCUMENTS_MARKER: &str = "NO DOCUMENTS RETRIEVED";

pub const DECISION_INSTRUCTION: &str = "End with exactly one line: DECISION: AGREE or DECISION: DISAGREE";

pub const AGREE_MEANING: &str = "DECISION: AGREE means you agree that, based on the retrieved documents, \
     the requirement under discussion is satisfied.";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("role {0} is not active in the discussion")]
    InactiveRole(RoleId),
    #[error("role {role} may not see {category} chunk {chunk_id}")]
    ScopeViolation {
        role: RoleId,
        category: Category,
        chunk_id: String,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RoleId {
    Rca,
    Sea,
    Kbr,
    Msa,
    Prc,
    Tla,
    Ira,
    Dra,
}

impl RoleId {
    /// Roster order.
    pub const ALL: [RoleId; 8] = [
        RoleId::Rca,
        RoleId::Sea,
        RoleId::Kbr,
        RoleId::Msa,
        RoleId::Prc,
        RoleId::Tla,
        RoleId::Ira,
        RoleId::Dra,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleId::Rca => "RCA",
            RoleId::Sea => "SEA",
            RoleId::Kbr => "KBR",
            RoleId::Msa => "MSA",
            RoleId::Prc => "PRC",
            RoleId::Tla => "TLA",
            RoleId::Ira => "IRA",
            RoleId::Dra => "DRA",
        }
    }

    /// Whether the role retrieves and takes per-round turns. The reporting
    /// agent only compiles the final report.
    pub fn queries_index(self) -> bool {
        self != RoleId::Dra
    }
}

impl fmt::Display for RoleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoleId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RoleId::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown role id {s:?}"))
    }
}

/// Decision-making phase of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Intelligence,
    Design,
    Choice,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Intelligence => "Intelligence",
            Phase::Design => "Design",
            Phase::Choice => "Choice",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRole {
    pub role_id: RoleId,
    pub name: String,
    pub function: String,
    pub system_prompt: String,
    pub allowed_categories: BTreeSet<Category>,
    pub active_in_discussion: bool,
}

impl AgentRole {
    pub fn may_see(&self, category: Category) -> bool {
        self.allowed_categories.contains(&category)
    }

    /// The retrieval filter for this role: a single category, or none when
    /// the role may read everything.
    pub fn category_filter(&self) -> Option<Category> {
        match self.allowed_categories.len() {
            1 => self.allowed_categories.iter().next().copied(),
            _ => None,
        }
    }
}

pub fn system_prompt_for(name: &str, function: &str) -> String {
    format!(
        "You are the {name}. Function: {function} Ground every claim in the provided document excerpts; \
         cite chunk ids in square brackets."
    )
}

/// The eight-agent roster. Regulatory, safety and reporting agents are active.
pub fn default_roles() -> Vec<AgentRole> {
    let table: [(RoleId, &str, &str, &[Category], bool); 8] = [
        (
            RoleId::Rca,
            "Regulatory Compliance Agent",
            "Combines national oversight and international regulations.",
            &[Category::Regulatory],
            true,
        ),
        (
            RoleId::Sea,
            "Safety & Environmental Agent",
            "Covers both safety and environmental impact assessments.",
            &[Category::Safety],
            true,
        ),
        (
            RoleId::Kbr,
            "Knowledge Base & Research Agent",
            "Merges R&D and knowledge maintenance.",
            &Category::ALL,
            false,
        ),
        (
            RoleId::Msa,
            "Monitoring and Surveillance Agent",
            "Handles real-time monitoring and anomaly detection.",
            &Category::ALL,
            false,
        ),
        (
            RoleId::Prc,
            "Public Relations & Communication Agent",
            "Integrates stakeholder communication and public relations.",
            &Category::ALL,
            false,
        ),
        (
            RoleId::Tla,
            "Transportation & Logistics Agent",
            "Manages logistics for nuclear waste transportation.",
            &Category::ALL,
            false,
        ),
        (
            RoleId::Ira,
            "Incident Response Agent",
            "Handles emergency and incident response.",
            &Category::ALL,
            false,
        ),
        (
            RoleId::Dra,
            "Documentation & Reporting Agent",
            "Manages reporting and documentation processes.",
            &Category::ALL,
            true,
        ),
    ];
    table
        .into_iter()
        .map(|(role_id, name, function, cats, active)| AgentRole {
            role_id,
            name: name.to_string(),
            function: function.to_string(),
            system_prompt: system_prompt_for(name, function),
            allowed_categories: cats.iter().copied().collect(),
            active_in_discussion: active,
        })
        .collect()
}

/// Config-file adjustments to a role. The roster itself is fixed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleOverride {
    pub system_prompt: Option<String>,
    pub active: Option<bool>,
}

pub fn apply_overrides(mut roles: Vec<AgentRole>, overrides: &BTreeMap<RoleId, RoleOverride>) -> Vec<AgentRole> {
    for role in &mut roles {
        if let Some(o) = overrides.get(&role.role_id) {
            if let Some(prompt) = &o.system_prompt {
                role.system_prompt = prompt.clone();
            }
            if let Some(active) = o.active {
                role.active_in_discussion = active;
            }
        }
    }
    roles
}

/// Active roles that take per-round turns, in roster order.
pub fn discussion_order(roles: &[AgentRole]) -> Vec<&AgentRole> {
    roles
        .iter()
        .filter(|r| r.active_in_discussion && r.role_id.queries_index())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionValue {
    Agree,
    Disagree,
}

impl fmt::Display for DecisionValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecisionValue::Agree => "AGREE",
            DecisionValue::Disagree => "DISAGREE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub value: DecisionValue,
    /// Set when no decision line was found and the Disagree fallback applied.
    pub parse_warning: bool,
}

impl Decision {
    pub const AGREE: Decision = Decision {
        value: DecisionValue::Agree,
        parse_warning: false,
    };
    pub const DISAGREE: Decision = Decision {
        value: DecisionValue::Disagree,
        parse_warning: false,
    };

    pub fn is_clean_agree(&self) -> bool {
        self.value == DecisionValue::Agree && !self.parse_warning
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnContext {
    pub task: String,
    pub round_index: usize,
    pub phase: Phase,
    pub prior_summary: String,
    pub peer_last_response: Option<String>,
}

fn decision_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^DECISION\s*:\s*(AGREE|DISAGREE)$").unwrap())
}

/// Finds the last `DECISION: AGREE|DISAGREE` line. Without one the result
/// is Disagree with `parse_warning` set.
pub fn parse_decision(response: &str) -> Decision {
    for line in response.lines().rev() {
        if let Some(cap) = decision_line().captures(line.trim()) {
            let value = if cap[1].eq_ignore_ascii_case("agree") {
                DecisionValue::Agree
            } else {
                DecisionValue::Disagree
            };
            return Decision {
                value,
                parse_warning: false,
            };
        }
    }
    Decision {
        value: DecisionValue::Disagree,
        parse_warning: true,
    }
}

/// What the task is about, e.g. "temporary nuclear waste storage" from
/// "...whether a proposed temporary nuclear waste storage site near...".
pub fn task_subject(task: &str) -> String {
    static RE: OnceLock<[Regex; 2]> = OnceLock::new();
    let [proposed, article] = RE.get_or_init(|| {
        [
            Regex::new(r"(?i)\bproposed\s+(.+?)\s+(?:site|facility)\b").unwrap(),
            Regex::new(r"(?i)\b(?:a|an|the)\s+(.+?)\s+(?:site|facility)\b").unwrap(),
        ]
    });
    for re in [proposed, article] {
        if let Some(c) = re.captures(task) {
            return c[1].trim().to_string();
        }
    }
    let trimmed = task.trim().trim_end_matches(['.', '?', '!']);
    let mut chars = trimmed.chars();
    match chars.next() {
        Some(first) => first.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// The named place in the task ("Winslow" from "near Winslow, Arizona").
pub fn task_site(task: &str) -> Option<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\b(?:near|at|in)\s+([A-Z][\w-]*(?:\s+[A-Z][\w-]*)*)").unwrap());
    re.captures(task).map(|c| c[1].to_string())
}

/// Fixed opening query for round one.
pub fn opening_query(role: RoleId, task: &str) -> String {
    let subject = task_subject(task);
    match role {
        RoleId::Rca => format!("What regulations govern {subject}?"),
        RoleId::Sea => match task_site(task) {
            Some(site) => format!("What are the geological and environmental risks for the {site} site?"),
            None => format!("What are the geological and environmental risks for the proposed {subject} site?"),
        },
        _ => format!("What requirements and risks apply to {subject}?"),
    }
}

fn truncate_chars(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((cut, _)) => &s[..cut],
        None => s,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewrittenQuery {
    pub query: String,
    /// True when the backend returned nothing usable and the previous query was reused.
    pub fallback: bool,
}

fn rewrite_request(role: &AgentRole, ctx: &TurnContext, previous: &str, temperature: f64) -> GenerationRequest {
    let mut user = String::new();
    user.push_str(&format!("Task: {}\n", ctx.task));
    user.push_str(&format!("Phase: {}\n", ctx.phase));
    user.push_str(&format!("Round: {}\n", ctx.round_index));
    user.push_str(&format!("Discussion so far:\n{}\n", or_none(&ctx.prior_summary)));
    if let Some(peer) = &ctx.peer_last_response {
        user.push_str(&format!("Peer's last response:\n{peer}\n"));
    }
    user.push_str(&format!("Previous query: {previous}\n\n"));
    user.push_str(
        "Rewrite your next document-retrieval query so it is precise, covers what the discussion still \
         needs, and matches the wording of relevant documents. Reply with the query only, on one line.",
    );
    GenerationRequest {
        role: role.role_id,
        system_prompt: role.system_prompt.clone(),
        user_prompt: user,
        temperature,
    }
}

fn or_none(s: &str) -> &str {
    if s.trim().is_empty() {
        "(none)"
    } else {
        s
    }
}

/// Produces this round's retrieval query. Round one uses a fixed template;
/// later rounds ask the backend to rewrite `previous_query` in context.
pub fn rewrite_query(
    role: &AgentRole,
    ctx: &TurnContext,
    previous_query: Option<&str>,
    backend: &dyn Backend,
    temperature: f64,
) -> Result<RewrittenQuery, AgentError> {
    if !role.active_in_discussion {
        return Err(AgentError::InactiveRole(role.role_id));
    }
    let opening = || opening_query(role.role_id, &ctx.task);
    if ctx.round_index <= 1 {
        return Ok(RewrittenQuery {
            query: truncate_chars(&opening(), MAX_QUERY_CHARS).to_string(),
            fallback: false,
        });
    }
    let previous = previous_query.map(str::to_string).unwrap_or_else(opening);
    let request = rewrite_request(role, ctx, &previous, temperature);
    match backend.generate(&request) {
        Ok(reply) => {
            let text = reply.text.trim();
            if text.is_empty() {
                return Ok(fallback(role, ctx, previous));
            }
            Ok(RewrittenQuery {
                query: truncate_chars(text, MAX_QUERY_CHARS).to_string(),
                fallback: false,
            })
        }
        Err(BackendError::EmptyCompletion) => Ok(fallback(role, ctx, previous)),
        Err(e) => Err(e.into()),
    }
}

fn fallback(role: &AgentRole, ctx: &TurnContext, previous: String) -> RewrittenQuery {
    log::warn!(
        "round {} {}: empty query rewrite, reusing previous query",
        ctx.round_index,
        role.role_id
    );
    RewrittenQuery {
        query: previous,
        fallback: true,
    }
}

/// Rejects hits outside the role's categories.
pub fn check_scope(role: &AgentRole, hits: &[CitedHit]) -> Result<(), AgentError> {
    match hits.iter().find(|h| !role.may_see(h.category)) {
        Some(h) => Err(AgentError::ScopeViolation {
            role: role.role_id,
            category: h.category,
            chunk_id: h.chunk_id.clone(),
        }),
        None => Ok(()),
    }
}

/// Builds the grounded generation request for one turn.
pub fn render_prompt(role: &AgentRole, ctx: &TurnContext, hits: &[CitedHit], temperature: f64) -> GenerationRequest {
    let mut user = String::new();
    user.push_str(&format!("Task: {}\n", ctx.task));
    user.push_str(&format!("Phase: {}\n", ctx.phase));
    user.push_str(&format!("Round: {}\n", ctx.round_index));
    user.push_str(&format!("Discussion so far:\n{}\n", or_none(&ctx.prior_summary)));
    if let Some(peer) = &ctx.peer_last_response {
        user.push_str(&format!("Peer's last response:\n{peer}\n"));
    }
    user.push_str("\nRetrieved documents:\n");
    if hits.is_empty() {
        user.push_str(NO_DOCUMENTS_MARKER);
        user.push('\n');
    }
    for hit in hits {
        user.push_str(&format!("[{}|{}] {}\n", hit.chunk_id, hit.section_label, hit.text.trim()));
    }
    user.push('\n');
    user.push_str(AGREE_MEANING);
    user.push('\n');
    user.push_str(DECISION_INSTRUCTION);
    GenerationRequest {
        role: role.role_id,
        system_prompt: role.system_prompt.clone(),
        user_prompt: user,
        temperature,
    }
}

/// The first sentence of `text`, on one line.
pub fn first_sentence(text: &str) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut chars = flat.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') && chars.peek().map_or(true, |(_, n)| n.is_whitespace()) {
            return flat[..i + c.len_utf8()].to_string();
        }
    }
    flat
}

pub fn summary_line(turn: &Turn) -> String {
    format!(
        "{}.{}: {} [{}]",
        turn.round_index,
        turn.role_id,
        first_sentence(&turn.response),
        turn.decision.value
    )
}

/// One line per turn, oldest first; the oldest lines are dropped until the
/// digest fits in `budget_chars`. If even the newest line is too long, its
/// tail is kept, so the result is always a suffix of the full digest.
pub fn summarize_history(turns: &[Turn], budget_chars: usize) -> String {
    let lines: Vec<String> = turns.iter().map(summary_line).collect();
    let mut kept = 0usize;
    let mut used = 0usize;
    for line in lines.iter().rev() {
        let cost = line.chars().count() + usize::from(kept > 0);
        if used + cost > budget_chars {
            break;
        }
        used += cost;
        kept += 1;
    }
    if kept == 0 {
        return match lines.last() {
            Some(newest) => {
                let n = newest.chars().count();
                newest.chars().skip(n.saturating_sub(budget_chars)).collect()
            }
            None => String::new(),
        };
    }
    lines[lines.len() - kept..].join("\n")
}
