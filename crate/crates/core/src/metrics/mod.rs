//! Diagnostic accuracy, physician-operation effectiveness, double-blind
//! adjudication scores and the misdiagnosis-accountability harness.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{JudgeClient, ModelError};
use crate::oracle::{best_section, ClinicalInfoDoc, NOT_MENTIONED, OVERLAP_THRESHOLD};
use crate::prompts;
use crate::protocol::{ProtocolError, Responder, Transcript};
use crate::stats::StatsError;
use crate::text::{content_token_set, normalize_answer};

pub mod attribution;
pub mod report;

pub use attribution::{
    attribute_misdiagnosis, evaluate_attribution, generate_perturbations, perturb_step, AttributionEval, AttributionJudge,
    AttributionLabel, Mutator, Perturbation, PromptAttributionJudge,
};
pub use report::{compare_reports, evaluate_bank, evaluate_case, CaseRow, Comparison, EvalConfig, MetricReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(#[from] ModelError),
    #[error("judge reply not understood: {0:?}")]
    UnparseableVerdict(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("score {0} outside [0, 10]")]
    ScoreOutOfRange(f64),
    #[error("double-blind scoring needs two distinct judges")]
    JudgesNotIndependent,
    #[error("transcript has no physician-answered step")]
    NoPhysicianStep,
    #[error("step {0} does not exist")]
    InvalidStep(usize),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("report inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub matched: bool,
    pub rationale: String,
    pub judge_id: String,
}

pub const NORMALIZED_JUDGE_ID: &str = "normalized-match";

#[derive(Clone)]
pub enum AccuracyMode {
    /// Case-, punctuation- and article-insensitive exact match.
    Normalized,
    Model(Arc<dyn JudgeClient>),
}

impl AccuracyMode {
    pub fn judge_id(&self) -> String {
        match self {
            AccuracyMode::Normalized => NORMALIZED_JUDGE_ID.to_string(),
            AccuracyMode::Model(j) => j.id().to_string(),
        }
    }
}

impl std::fmt::Debug for AccuracyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AccuracyMode({})", self.judge_id())
    }
}

/// Reads a yes/no style verdict from the first word of a judge reply.
pub fn parse_boolean_reply(reply: &str) -> Option<bool> {
    let first = reply
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())?
        .to_lowercase();
    match first.as_str() {
        "true" | "yes" | "correct" | "match" => Some(true),
        "false" | "no" | "incorrect" => Some(false),
        _ => None,
    }
}

pub fn judge_accuracy(predicted: &str, gold: &str, mode: &AccuracyMode) -> Result<JudgeVerdict, MetricsError> {
    if predicted.trim().is_empty() || gold.trim().is_empty() {
        return Err(MetricsError::EmptyInput("predicted and gold answers must be non-empty".into()));
    }
    match mode {
        AccuracyMode::Normalized => {
            let (p, g) = (normalize_answer(predicted), normalize_answer(gold));
            let matched = p == g;
            Ok(JudgeVerdict {
                matched,
                rationale: format!("normalized {p:?} {} {g:?}", if matched { "==" } else { "!=" }),
                judge_id: NORMALIZED_JUDGE_ID.to_string(),
            })
        }
        AccuracyMode::Model(judge) => {
            let prompt = prompts::JUDGE_ACCURACY.render(&[("predicted", predicted), ("gold", gold)]);
            let reply = judge.complete(&prompt)?;
            let matched = parse_boolean_reply(&reply).ok_or_else(|| MetricsError::UnparseableVerdict(reply.clone()))?;
            Ok(JudgeVerdict {
                matched,
                rationale: reply.trim().to_string(),
                judge_id: judge.id().to_string(),
            })
        }
    }
}

#[derive(Clone)]
pub enum UsefulnessMode {
    /// The request reaches the oracle's overlap threshold against some
    /// section of the case report.
    Lexical,
    Model(Arc<dyn JudgeClient>),
}

impl std::fmt::Debug for UsefulnessMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UsefulnessMode::Lexical => f.write_str("Lexical"),
            UsefulnessMode::Model(j) => write!(f, "Model({})", j.id()),
        }
    }
}

/// Whether one physician request was useful: it got a real answer and the
/// operation appears in the case report.
pub fn operation_useful(
    request: &str,
    answer: &str,
    doc: &ClinicalInfoDoc,
    mode: &UsefulnessMode,
) -> Result<bool, MetricsError> {
    if answer.trim() == NOT_MENTIONED {
        return Ok(false);
    }
    match mode {
        UsefulnessMode::Lexical => Ok(best_section(request, doc).is_some_and(|(_, s)| s >= OVERLAP_THRESHOLD)),
        UsefulnessMode::Model(judge) => {
            let prompt = prompts::OPERATION_USEFULNESS.render(&[("request", request), ("clinical_info", &doc.render())]);
            let reply = judge.complete(&prompt)?;
            parse_boolean_reply(&reply).ok_or(MetricsError::UnparseableVerdict(reply))
        }
    }
}

/// Share of physician requests that were useful; 1.0 when there were none.
pub fn op_effectiveness(t: &Transcript, doc: &ClinicalInfoDoc, mode: &UsefulnessMode) -> Result<f64, MetricsError> {
    let mut total = 0usize;
    let mut useful = 0usize;
    for s in t.steps.iter().filter(|s| s.responder == Responder::Physician) {
        total += 1;
        let answer = s.answer.as_deref().unwrap_or(NOT_MENTIONED);
        if operation_useful(&s.question, answer, doc, mode)? {
            useful += 1;
        }
    }
    Ok(if total == 0 { 1.0 } else { useful as f64 / total as f64 })
}

/// Scores agreement between a model diagnosis and a specialist's, 0 to 10.
pub trait ScoreJudge: Send + Sync {
    fn id(&self) -> &str;
    fn score(&self, llm_diagnosis: &str, specialist_diagnosis: &str) -> Result<f64, MetricsError>;
}

/// Sends the adjudication prompt to a judge model and reads back a number.
pub struct PromptScoreJudge<J> {
    pub client: J,
}

impl<J: JudgeClient> ScoreJudge for PromptScoreJudge<J> {
    fn id(&self) -> &str {
        self.client.id()
    }

    fn score(&self, llm_diagnosis: &str, specialist_diagnosis: &str) -> Result<f64, MetricsError> {
        let prompt = prompts::DOUBLE_BLIND_SCORE.render(&[
            ("llm_diagnosis", llm_diagnosis),
            ("specialist_diagnosis", specialist_diagnosis),
        ]);
        let reply = self.client.complete(&prompt)?;
        reply
            .split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
            .find(|w| !w.is_empty())
            .and_then(|w| w.parse::<f64>().ok())
            .ok_or(MetricsError::UnparseableVerdict(reply))
    }
}

/// Offline rubric: ten times the Jaccard similarity of content tokens.
pub struct RubricScoreJudge {
    id: String,
}

impl RubricScoreJudge {
    pub fn new(id: impl Into<String>) -> Self {
        RubricScoreJudge { id: id.into() }
    }
}

impl ScoreJudge for RubricScoreJudge {
    fn id(&self) -> &str {
        &self.id
    }

    fn score(&self, llm_diagnosis: &str, specialist_diagnosis: &str) -> Result<f64, MetricsError> {
        let a = content_token_set(llm_diagnosis);
        let b = content_token_set(specialist_diagnosis);
        let union = a.union(&b).count();
        if union == 0 {
            return Ok(0.0);
        }
        Ok(10.0 * a.intersection(&b).count() as f64 / union as f64)
    }
}

/// Mean of two independent judges' scores. Each judge is called separately
/// and never sees the other's score.
pub fn double_blind_score(
    llm_diagnosis: &str,
    specialist_diagnosis: &str,
    judges: [&dyn ScoreJudge; 2],
) -> Result<f64, MetricsError> {
    if judges[0].id() == judges[1].id() {
        return Err(MetricsError::JudgesNotIndependent);
    }
    if llm_diagnosis.trim().is_empty() || specialist_diagnosis.trim().is_empty() {
        return Err(MetricsError::EmptyInput("both diagnoses must be non-empty".into()));
    }
    let mut total = 0.0;
    for j in judges {
        let s = j.score(llm_diagnosis, specialist_diagnosis)?;
        if !(0.0..=10.0).contains(&s) {
            return Err(MetricsError::ScoreOutOfRange(s));
        }
        total += s;
    }
    Ok(total / 2.0)
}
