//! Orchestration engine and evaluation harness for LLM-directed, stepwise
//! clinical diagnosis.
//!
//! A [`engine`] session starts from a vague chief complaint and lets a
//! director model request clinical operations one step at a time, routing
//! physician-tagged requests to an [`engine::AssistantPort`]. The remaining
//! modules build training data from such transcripts, compute the training
//! objectives and score finished sessions.

pub mod casebank;
pub mod engine;
pub mod llm;
pub mod masks;
pub mod metrics;
pub mod oracle;
pub mod par;
pub mod preference;
pub mod prompts;
pub mod protocol;
pub mod retrieval;
pub mod stats;
pub mod text;

pub use casebank::{CaseBank, CaseRecord};
pub use engine::{run_session, AssistantPort, SessionConfig, SessionResult};
pub use llm::{DirectorClient, JudgeClient, SamplingParams};
pub use protocol::{emit_transcript, parse_transcript, Responder, Step, Transcript};
