//! Document-grounded multi-agent deliberation: corpus ingestion, vector
//! retrieval, round-based discussion, evaluation metrics and reporting.

pub mod agents;
pub mod backend;
pub mod corpus;
pub mod discussion;
pub mod index;
pub mod metrics;
pub mod par;
pub mod report;

pub use agents::{Decision, DecisionValue, Phase, RoleId};
pub use backend::{Backend, BackendConfig, BackendMode, MockBackend};
pub use corpus::{Category, ChunkPolicy, Corpus};
pub use discussion::{run_discussion, DiscussionConfig, Transcript};
pub use index::{build_index, cosine_similarity, VectorIndex};
pub use metrics::{compute_metrics, MetricsBundle};
pub use report::{compile_report, render_markdown, ComplianceReport, Verdict};
