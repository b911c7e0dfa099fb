//! The reporting agent's output: three narrative sections compiled from the
//! discussion, a verdict, and a markdown/JSON rendering.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{default_roles, Decision, Phase, RoleId};
use crate::backend::{Backend, BackendError, GenerationRequest};
use crate::discussion::{Transcript, Turn};
use crate::metrics::MetricsBundle;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 0.5;
/// Character budget for the findings passed to each section prompt.
pub const SECTION_SOURCE_BUDGET: usize = 6000;

pub const SECTION_TITLES: [&str; 3] = [
    "Regulatory Status",
    "Environmental & Safety Assessment",
    "Mitigation & Emergency Plans",
];

const SECTION_QUESTIONS: [&str; 3] = [
    "Does the site meet national and state requirements?",
    "What are the environmental and safety risks of the site?",
    "What mitigation measures and emergency plans are needed?",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("transcript has no completed rounds")]
    EmptyTranscript,
    #[error("metrics were computed from transcript {metrics} but the transcript hashes to {transcript}")]
    TranscriptMetricsMismatch { transcript: String, metrics: String },
    #[error("generating section '{section}': {source}")]
    Backend {
        section: &'static str,
        #[source]
        source: BackendError,
    },
    #[error("report file: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    PreliminaryApproval,
    GapsIdentified,
}

impl Verdict {
    pub fn banner(self) -> &'static str {
        match self {
            Verdict::PreliminaryApproval => "VERDICT: PRELIMINARY APPROVAL",
            Verdict::GapsIdentified => "VERDICT: GAPS IDENTIFIED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSection {
    pub title: String,
    pub narrative: String,
    pub cited_chunk_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleDecision {
    pub role_id: RoleId,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub overall_agreement_rate: f64,
    pub final_round_drift: f64,
    /// Mean retrieval score over the final round's hits; 0 when there were none.
    pub mean_final_round_relevance: f64,
    pub relevance_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub schema_version: u32,
    pub task: String,
    pub transcript_hash: String,
    pub regulatory_status: ReportSection,
    pub environmental_safety: ReportSection,
    pub mitigation_emergency: ReportSection,
    pub verdict: Verdict,
    pub verdict_rationale: String,
    pub final_round_decisions: Vec<RoleDecision>,
    pub metric_summary: MetricSummary,
    /// Every turn's decision, round by round.
    pub decision_log: Vec<(usize, Vec<RoleDecision>)>,
}

impl ComplianceReport {
    pub fn sections(&self) -> [&ReportSection; 3] {
        [&self.regulatory_status, &self.environmental_safety, &self.mitigation_emergency]
    }

    /// True when the stored verdict follows from the report's own decisions and relevance.
    pub fn is_self_consistent(&self) -> bool {
        let decisions: Vec<Decision> = self.final_round_decisions.iter().map(|d| d.decision).collect();
        self.verdict
            == verdict_rule(
                &decisions,
                self.metric_summary.mean_final_round_relevance,
                self.metric_summary.relevance_threshold,
            )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize")
    }

    pub fn from_json(json: &str) -> Result<Self, ReportError> {
        let r: ComplianceReport = serde_json::from_str(json).map_err(|e| ReportError::Schema(e.to_string()))?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(ReportError::Schema(format!("unsupported schema_version {}", r.schema_version)));
        }
        Ok(r)
    }
}

/// Approval needs every decision to be a cleanly parsed Agree and relevance
/// at or above the threshold. An empty decision list is a gap.
pub fn verdict_rule(decisions: &[Decision], mean_relevance: f64, threshold: f64) -> Verdict {
    if !decisions.is_empty() && decisions.iter().all(Decision::is_clean_agree) && mean_relevance >= threshold {
        Verdict::PreliminaryApproval
    } else {
        Verdict::GapsIdentified
    }
}

fn rationale(decisions: &[RoleDecision], mean_relevance: f64, threshold: f64, verdict: Verdict) -> String {
    if verdict == Verdict::PreliminaryApproval {
        return format!(
            "All final-round decisions are AGREE and mean final-round relevance {mean_relevance:.3} \
             meets the threshold {threshold:.2}."
        );
    }
    let mut gaps = Vec::new();
    if decisions.is_empty() {
        gaps.push("no final-round decisions were recorded".to_string());
    }
    for d in decisions {
        if d.decision.parse_warning {
            gaps.push(format!("{} gave no parseable decision", d.role_id));
        } else if !d.decision.is_clean_agree() {
            gaps.push(format!("{} disagrees", d.role_id));
        }
    }
    if mean_relevance < threshold {
        gaps.push(format!(
            "mean final-round relevance {mean_relevance:.3} is below the threshold {threshold:.2}"
        ));
    }
    format!("Gaps remain: {}.", gaps.join("; "))
}

/// Mean retrieval score over all hits in the final round.
pub fn mean_final_round_relevance(t: &Transcript) -> f64 {
    let scores: Vec<f64> = t
        .final_round()
        .map(|r| r.turns.iter().flat_map(|x| x.relevance_scores.iter().copied()).collect())
        .unwrap_or_default();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Turns feeding each section: RCA, SEA, and both in the final phase reached.
fn section_sources(t: &Transcript) -> [Vec<&Turn>; 3] {
    let final_phase: Option<Phase> = t.final_round().and_then(|r| r.turns.first()).map(|x| x.phase);
    let of = |role| t.turns().filter(|x| x.role_id == role).collect::<Vec<_>>();
    let mitigation = t
        .turns()
        .filter(|x| Some(x.phase) == final_phase && matches!(x.role_id, RoleId::Rca | RoleId::Sea))
        .collect();
    [of(RoleId::Rca), of(RoleId::Sea), mitigation]
}

/// Findings text, newest turns kept when over budget.
fn findings(turns: &[&Turn], budget: usize) -> String {
    let mut kept: Vec<String> = Vec::new();
    let mut used = 0;
    for turn in turns.iter().rev() {
        let block = format!("[round {} {}] {}", turn.round_index, turn.role_id, turn.response.trim());
        let cost = block.chars().count() + 2;
        if used + cost > budget && !kept.is_empty() {
            break;
        }
        used += cost;
        kept.push(block);
    }
    if kept.is_empty() {
        return "No agent findings were recorded.".into();
    }
    kept.reverse();
    kept.join("\n\n")
}

fn cited(turns: &[&Turn]) -> Vec<String> {
    turns
        .iter()
        .flat_map(|x| x.hits.iter().map(|h| h.chunk_id.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Compiles the report. Sections are generated one after another so a
/// scripted backend sees them in a fixed order.
pub fn compile_report(
    t: &Transcript,
    metrics: &MetricsBundle,
    backend: &dyn Backend,
    relevance_threshold: f64,
) -> Result<ComplianceReport, ReportError> {
    let final_round = t.final_round().filter(|r| !r.turns.is_empty()).ok_or(ReportError::EmptyTranscript)?;
    let hash = t.content_hash();
    if metrics.transcript_hash != hash {
        return Err(ReportError::TranscriptMetricsMismatch {
            transcript: hash,
            metrics: metrics.transcript_hash.clone(),
        });
    }
    let dra = default_roles().into_iter().find(|r| r.role_id == RoleId::Dra).expect("DRA in roster");

    let sources = section_sources(t);
    let mut sections = Vec::with_capacity(3);
    for (i, turns) in sources.iter().enumerate() {
        let title = SECTION_TITLES[i];
        let request = GenerationRequest {
            role: RoleId::Dra,
            system_prompt: dra.system_prompt.clone(),
            user_prompt: format!(
                "Task: {}\nSection: {title}\nQuestion: {}\n\nAgent findings:\n{}\n\n\
                 Write this section of the compliance report.",
                t.config.task,
                SECTION_QUESTIONS[i],
                findings(turns, SECTION_SOURCE_BUDGET)
            ),
            temperature: t.config.temperature,
        };
        let narrative = backend
            .generate(&request)
            .map_err(|source| ReportError::Backend { section: title, source })?
            .text
            .trim()
            .to_string();
        sections.push(ReportSection {
            title: title.to_string(),
            narrative,
            cited_chunk_ids: cited(turns),
        });
    }

    let final_round_decisions: Vec<RoleDecision> = final_round
        .turns
        .iter()
        .map(|x| RoleDecision {
            role_id: x.role_id,
            decision: x.decision,
        })
        .collect();
    let relevance = mean_final_round_relevance(t);
    let decisions: Vec<Decision> = final_round_decisions.iter().map(|d| d.decision).collect();
    let verdict = verdict_rule(&decisions, relevance, relevance_threshold);
    let decision_log = t
        .rounds
        .iter()
        .map(|r| {
            let ds = r
                .turns
                .iter()
                .map(|x| RoleDecision {
                    role_id: x.role_id,
                    decision: x.decision,
                })
                .collect();
            (r.round_index, ds)
        })
        .collect();

    let mut it = sections.into_iter();
    Ok(ComplianceReport {
        schema_version: REPORT_SCHEMA_VERSION,
        task: t.config.task.clone(),
        transcript_hash: hash,
        regulatory_status: it.next().unwrap(),
        environmental_safety: it.next().unwrap(),
        mitigation_emergency: it.next().unwrap(),
        verdict,
        verdict_rationale: rationale(&final_round_decisions, relevance, relevance_threshold, verdict),
        final_round_decisions,
        metric_summary: MetricSummary {
            overall_agreement_rate: metrics.agreement.overall_rate,
            final_round_drift: metrics.drift.per_round_drift.last().copied().unwrap_or(0.0),
            mean_final_round_relevance: relevance,
            relevance_threshold,
        },
        decision_log,
    })
}

fn decision_label(d: &Decision) -> String {
    if d.parse_warning {
        format!("{} (unparsed)", d.value)
    } else {
        d.value.to_string()
    }
}

/// Narrative lines starting with `#` would become headings; escape them.
fn escape_narrative(text: &str) -> String {
    text.lines()
        .map(|l| if l.trim_start().starts_with('#') { format!("\\{}", l.trim_start()) } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_markdown(r: &ComplianceReport) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Compliance Report\n");
    let _ = writeln!(md, "**Task:** {}\n", r.task);
    let _ = writeln!(md, "**{}**\n", r.verdict.banner());
    let _ = writeln!(md, "{}\n", r.verdict_rationale);
    for s in r.sections() {
        let _ = writeln!(md, "## {}\n", s.title);
        let _ = writeln!(md, "{}\n", escape_narrative(&s.narrative));
        let _ = writeln!(md, "Sources:");
        if s.cited_chunk_ids.is_empty() {
            let _ = writeln!(md, "- (none)");
        }
        for id in &s.cited_chunk_ids {
            let _ = writeln!(md, "- `{id}`");
        }
        md.push('\n');
    }
    let m = &r.metric_summary;
    let _ = writeln!(md, "### Metric summary\n");
    let _ = writeln!(md, "| Metric | Value |\n|---|---|");
    let _ = writeln!(md, "| Overall agreement rate | {:.4} |", m.overall_agreement_rate);
    let _ = writeln!(md, "| Final-round drift | {:.4} |", m.final_round_drift);
    let _ = writeln!(md, "| Mean final-round relevance | {:.4} |", m.mean_final_round_relevance);
    let _ = writeln!(md, "| Relevance threshold | {:.2} |\n", m.relevance_threshold);
    let _ = writeln!(md, "### Decision log\n");
    let _ = writeln!(md, "| Round | Decisions |\n|---|---|");
    for (round, ds) in &r.decision_log {
        let cells: Vec<String> = ds.iter().map(|d| format!("{} {}", d.role_id, decision_label(&d.decision))).collect();
        let _ = writeln!(md, "| {round} | {} |", cells.join(", "));
    }
    md
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::DecisionValue;
    use crate::backend::MockBackend;
    use crate::corpus::Category;
    use crate::discussion::{CitedHit, CorpusRef, DiscussionConfig, Round, TRANSCRIPT_SCHEMA_VERSION};
    use crate::metrics::compute_metrics;
    use std::collections::BTreeMap;

    const A: Decision = Decision::AGREE;
    const D: Decision = Decision::DISAGREE;
    const W: Decision = Decision {
        value: DecisionValue::Agree,
        parse_warning: true,
    };

    #[test]
    fn verdict_examples() {
        assert_eq!(verdict_rule(&[A, A], 0.8, 0.5), Verdict::PreliminaryApproval);
        assert_eq!(verdict_rule(&[A, D], 0.8, 0.5), Verdict::GapsIdentified);
        assert_eq!(verdict_rule(&[A, A], 0.3, 0.5), Verdict::GapsIdentified);
        assert_eq!(verdict_rule(&[A, A], 0.51, 0.5), Verdict::PreliminaryApproval);
        assert_eq!(verdict_rule(&[A, W], 0.9, 0.5), Verdict::GapsIdentified);
        assert_eq!(verdict_rule(&[A, A], 0.5, 0.5), Verdict::PreliminaryApproval);
        assert_eq!(verdict_rule(&[], 0.9, 0.5), Verdict::GapsIdentified);
    }

    #[test]
    fn rationale_names_relevance_shortfall() {
        let ds = [RoleId::Rca, RoleId::Sea].map(|role_id| RoleDecision { role_id, decision: A });
        let text = rationale(&ds, 0.3, 0.5, Verdict::GapsIdentified);
        assert!(text.contains("relevance 0.300 is below"), "{text}");
        let ds = [RoleDecision {
            role_id: RoleId::Sea,
            decision: D,
        }];
        assert!(rationale(&ds, 0.9, 0.5, Verdict::GapsIdentified).contains("SEA disagrees"));
    }

    fn hit(id: &str, score: f64) -> CitedHit {
        let (doc, _) = id.split_once('#').unwrap();
        CitedHit {
            chunk_id: id.into(),
            doc_id: doc.into(),
            section_label: "Paragraph 1".into(),
            category: Category::Regulatory,
            score,
            rank: 0,
            text: format!("{doc} storage permit text"),
        }
    }

    fn turn(round: usize, phase: Phase, role: RoleId, decision: Decision, hits: Vec<CitedHit>) -> Turn {
        Turn {
            round_index: round,
            phase,
            role_id: role,
            query: format!("{role} query {round}"),
            query_fallback: false,
            relevance_scores: hits.iter().map(|h| h.score).collect(),
            hits,
            response: format!("{role} finding {round} storage permit"),
            decision,
        }
    }

    fn sample(last: [Decision; 2], score: f64) -> Transcript {
        let rounds = vec![
            Round {
                round_index: 1,
                turns: vec![
                    turn(1, Phase::Intelligence, RoleId::Rca, D, vec![hit("doe#0", 0.9)]),
                    turn(1, Phase::Intelligence, RoleId::Sea, D, vec![hit("usgs#0", 0.9)]),
                ],
            },
            Round {
                round_index: 2,
                turns: vec![
                    turn(2, Phase::Choice, RoleId::Rca, last[0], vec![hit("doe#1", score)]),
                    turn(2, Phase::Choice, RoleId::Sea, last[1], vec![hit("usgs#1", score)]),
                ],
            },
        ];
        Transcript {
            schema_version: TRANSCRIPT_SCHEMA_VERSION,
            config: DiscussionConfig {
                rounds: 2,
                ..DiscussionConfig::new("Validate the proposed storage site near Winslow.")
            },
            corpus_ref: CorpusRef {
                manifest: "m.json".into(),
                content_hash: "h".into(),
                chunk_ids: vec!["doe#0".into(), "doe#1".into(), "usgs#0".into(), "usgs#1".into()],
            },
            turn_order: vec![RoleId::Rca, RoleId::Sea],
            rounds,
            completed_rounds: 2,
            stopped_early: false,
            created_at: String::new(),
        }
    }

    fn dra_backend() -> MockBackend {
        let mut script = BTreeMap::new();
        script.insert(
            RoleId::Dra,
            vec!["Regulatory narrative.".into(), "# Safety narrative.".into(), "Mitigation narrative.".into()],
        );
        MockBackend::with_script(64, script)
    }

    fn compile(t: &Transcript) -> ComplianceReport {
        let metrics = compute_metrics(t, &MockBackend::new(64), None).unwrap();
        compile_report(t, &metrics, &dra_backend(), DEFAULT_RELEVANCE_THRESHOLD).unwrap()
    }

    #[test]
    fn compiles_sections_in_order() {
        let t = sample([A, A], 0.8);
        let r = compile(&t);
        assert_eq!(r.regulatory_status.narrative, "Regulatory narrative.");
        assert_eq!(r.environmental_safety.narrative, "# Safety narrative.");
        assert_eq!(r.mitigation_emergency.narrative, "Mitigation narrative.");
        assert_eq!(r.regulatory_status.cited_chunk_ids, ["doe#0", "doe#1"]);
        assert_eq!(r.environmental_safety.cited_chunk_ids, ["usgs#0", "usgs#1"]);
        assert_eq!(r.mitigation_emergency.cited_chunk_ids, ["doe#1", "usgs#1"]);
        assert_eq!(r.verdict, Verdict::PreliminaryApproval);
        assert!((r.metric_summary.mean_final_round_relevance - 0.8).abs() < 1e-12);
        assert!(r.is_self_consistent());
        assert_eq!(r.decision_log.len(), 2);
    }

    #[test]
    fn citations_come_from_matching_turns() {
        let t = sample([A, D], 0.4);
        let r = compile(&t);
        let ids_of = |role: Option<RoleId>| -> BTreeSet<String> {
            t.turns()
                .filter(|x| role.map_or(true, |r| x.role_id == r))
                .flat_map(|x| x.hits.iter().map(|h| h.chunk_id.clone()))
                .collect()
        };
        assert!(r.regulatory_status.cited_chunk_ids.iter().all(|c| ids_of(Some(RoleId::Rca)).contains(c)));
        assert!(r.environmental_safety.cited_chunk_ids.iter().all(|c| ids_of(Some(RoleId::Sea)).contains(c)));
        assert!(r.mitigation_emergency.cited_chunk_ids.iter().all(|c| ids_of(None).contains(c)));
        assert_eq!(r.verdict, Verdict::GapsIdentified);
        assert!(r.is_self_consistent());
    }

    #[test]
    fn hash_mismatch_is_rejected() {
        let t = sample([A, A], 0.8);
        let mut metrics = compute_metrics(&t, &MockBackend::new(64), None).unwrap();
        metrics.transcript_hash = "0".repeat(64);
        let err = compile_report(&t, &metrics, &dra_backend(), 0.5).unwrap_err();
        assert!(matches!(err, ReportError::TranscriptMetricsMismatch { .. }));
    }

    #[test]
    fn exhausted_script_is_a_backend_error() {
        let t = sample([A, A], 0.8);
        let metrics = compute_metrics(&t, &MockBackend::new(64), None).unwrap();
        let err = compile_report(&t, &metrics, &MockBackend::new(64), 0.5).unwrap_err();
        assert!(matches!(err, ReportError::Backend { section: "Regulatory Status", .. }));
    }

    #[test]
    fn markdown_structure() {
        let r = compile(&sample([A, A], 0.8));
        let md = render_markdown(&r);
        let headers: Vec<&str> = md.lines().filter(|l| l.starts_with("## ")).collect();
        assert_eq!(headers, SECTION_TITLES.map(|s| format!("## {s}")).iter().map(String::as_str).collect::<Vec<_>>());
        assert!(md.lines().any(|l| l.contains("VERDICT: PRELIMINARY APPROVAL")));
        assert!(md.contains("\\# Safety narrative."));
        assert_eq!(md, render_markdown(&r));
        assert_eq!(md.matches("Sources:").count(), 3);

        let r = compile(&sample([A, D], 0.8));
        assert!(render_markdown(&r).contains("VERDICT: GAPS IDENTIFIED"));
    }

    #[test]
    fn json_round_trip() {
        let r = compile(&sample([A, W], 0.8));
        assert_eq!(r.verdict, Verdict::GapsIdentified);
        let back = ComplianceReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(back.is_self_consistent());
        assert!(ComplianceReport::from_json("{\"schema_version\": 2}").is_err());
    }
}
