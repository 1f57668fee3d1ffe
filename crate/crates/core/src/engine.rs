//! Session state machine for one full-process diagnostic episode.
//!
//! The director sees the canonical emitted transcript and proposes one step at
//! a time. `<LLM>` steps carry their own answer; `<Physician>` steps are routed
//! to the [`AssistantPort`] and the returned result becomes the answer. The
//! episode ends on a final diagnosis or after `step_cap` steps.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casebank::CaseRecord;
use crate::llm::{DirectorClient, ModelError, SamplingParams};
use crate::prompts;
use crate::protocol::{
    emit_transcript, parse_continuation, Continuation, FinalDiagnosis, ProtocolError, Responder, Step,
    Transcript,
};

pub const DEFAULT_STEP_CAP: usize = 20;
pub const DEFAULT_RETRY_LIMIT: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssistantError {
    #[error("assistant unavailable: {0}")]
    Unavailable(String),
    #[error("timed out waiting for the physician")]
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("director output for step {step} unparseable after {attempts} attempts: {last}")]
    DirectorProtocolError {
        step: usize,
        attempts: u32,
        last: ProtocolError,
    },
    #[error("director unavailable: {0}")]
    DirectorUnavailable(#[from] ModelError),
    #[error(transparent)]
    AssistantUnavailable(#[from] AssistantError),
    #[error("invalid case: {0}")]
    InvalidCase(String),
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("transcript prefix rejected: {0}")]
    InvalidPrefix(ProtocolError),
}

/// What the assistant knows about the request besides its text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssistantContext<'a> {
    pub case_id: &'a str,
    pub step: usize,
}

/// Fulfils `<Physician>` requests. Implementations always return text,
/// possibly the literal "Not mentioned".
pub trait AssistantPort: Send + Sync {
    fn fulfill(&self, request: &str, ctx: &AssistantContext<'_>) -> Result<String, AssistantError>;
}

impl<T: AssistantPort + ?Sized> AssistantPort for std::sync::Arc<T> {
    fn fulfill(&self, request: &str, ctx: &AssistantContext<'_>) -> Result<String, AssistantError> {
        (**self).fulfill(request, ctx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub step_cap: usize,
    pub sampling: SamplingParams,
    pub retry_limit: u32,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            step_cap: DEFAULT_STEP_CAP,
            sampling: SamplingParams::evaluation(),
            retry_limit: DEFAULT_RETRY_LIMIT,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.step_cap == 0 {
            return Err(EngineError::InvalidConfig("step_cap must be >= 1".into()));
        }
        self.sampling.validate().map_err(EngineError::InvalidConfig)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssistantCall {
    pub request: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTrace {
    pub index: usize,
    pub responder: Responder,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assistant_call: Option<AssistantCall>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionOutcome {
    Finalized,
    StepCapReached,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub case_id: String,
    pub steps: Vec<StepTrace>,
    pub outcome: SessionOutcome,
    pub director_calls: u32,
}

impl SessionTrace {
    pub fn assistant_calls(&self) -> impl Iterator<Item = (usize, &AssistantCall)> {
        self.steps
            .iter()
            .filter_map(|s| s.assistant_call.as_ref().map(|c| (s.index, c)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub transcript: Transcript,
    pub trace: SessionTrace,
}

/// Progress notifications, in the order they happen. Replaying them with
/// [`apply_event`] rebuilds the transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Started {
        case_id: String,
        instruction: String,
    },
    DirectorRetry {
        step: usize,
        attempt: u32,
        error: String,
    },
    StepProposed {
        step: Step,
    },
    AwaitingPhysician {
        step: usize,
        question: String,
    },
    AnswerRecorded {
        step: usize,
        answer: String,
    },
    Finalized {
        body: String,
    },
    StepCapReached {
        steps: usize,
    },
    Failed {
        error: String,
    },
}

/// Folds one event into a transcript under reconstruction.
pub fn apply_event(t: &mut Transcript, event: &SessionEvent) -> Result<(), ProtocolError> {
    match event {
        SessionEvent::Started { instruction, .. } => {
            *t = Transcript::new(instruction.clone());
        }
        SessionEvent::StepProposed { step } => {
            if step.index != t.steps.len() + 1 {
                return Err(ProtocolError::NonContiguousIndex {
                    expected: t.steps.len() + 1,
                    found: step.index,
                });
            }
            t.steps.push(step.clone());
        }
        SessionEvent::AnswerRecorded { step, answer } => {
            let s = t
                .steps
                .get_mut(step.wrapping_sub(1))
                .ok_or(ProtocolError::InvalidStepRef(*step))?;
            s.answer = Some(answer.clone());
        }
        SessionEvent::Finalized { body } => {
            t.final_diagnosis = Some(FinalDiagnosis::new(body.clone())?);
        }
        SessionEvent::DirectorRetry { .. }
        | SessionEvent::AwaitingPhysician { .. }
        | SessionEvent::StepCapReached { .. }
        | SessionEvent::Failed { .. } => {}
    }
    Ok(())
}

pub fn replay_events<'a>(events: impl IntoIterator<Item = &'a SessionEvent>) -> Result<Transcript, ProtocolError> {
    let mut t = Transcript::default();
    for e in events {
        apply_event(&mut t, e)?;
    }
    t.validate()?;
    Ok(t)
}

/// γ: how many steps asked a physician for help.
pub fn count_physician_ops(t: &Transcript) -> usize {
    t.physician_count()
}

/// Asks the director for the next block, re-prompting with a repair note on
/// unparseable output. Returns the continuation and the number of attempts.
pub fn request_continuation(
    director: &dyn DirectorClient,
    transcript: &Transcript,
    sampling: &SamplingParams,
    retry_limit: u32,
    mut on_retry: impl FnMut(u32, &ProtocolError),
) -> Result<(Continuation, u32), EngineError> {
    let prefix = emit_transcript(transcript).map_err(EngineError::InvalidPrefix)?;
    let next = transcript.steps.len() + 1;
    let mut prompt = prefix.clone();
    let mut attempt = 0;
    loop {
        attempt += 1;
        let out = director.generate(&prompt, sampling)?;
        let parsed = parse_continuation(&out, next).and_then(|c| {
            if let Continuation::Final(fd) = &c {
                let mut probe = transcript.clone();
                probe.final_diagnosis = Some(fd.clone());
                probe.validate()?;
            }
            Ok(c)
        });
        match parsed {
            Ok(c) => return Ok((c, attempt)),
            Err(e) if attempt <= retry_limit => {
                on_retry(attempt, &e);
                let note = prompts::REPAIR.render(&[("error", &e.to_string()), ("step", &next.to_string())]);
                prompt = format!("{prefix}{note}");
            }
            Err(e) => {
                return Err(EngineError::DirectorProtocolError {
                    step: next,
                    attempts: attempt,
                    last: e,
                })
            }
        }
    }
}

pub fn run_session(
    case: &CaseRecord,
    director: &dyn DirectorClient,
    assistant: &dyn AssistantPort,
    cfg: &SessionConfig,
) -> Result<SessionResult, EngineError> {
    run_session_observed(case, director, assistant, cfg, &mut |_| {})
}

pub fn run_session_observed(
    case: &CaseRecord,
    director: &dyn DirectorClient,
    assistant: &dyn AssistantPort,
    cfg: &SessionConfig,
    observer: &mut dyn FnMut(&SessionEvent),
) -> Result<SessionResult, EngineError> {
    if case.chief_complaint.trim().is_empty() || case.question.trim().is_empty() {
        return Err(EngineError::InvalidCase(format!(
            "case {} needs a chief complaint and a question",
            case.case_id
        )));
    }
    let transcript = Transcript::new(case.instruction());
    observer(&SessionEvent::Started {
        case_id: case.case_id.clone(),
        instruction: transcript.instruction.clone(),
    });
    continue_session(&case.case_id, transcript, director, assistant, cfg, observer)
}

/// Drives an episode onward from an existing (unfinished) transcript.
pub fn continue_session(
    case_id: &str,
    mut transcript: Transcript,
    director: &dyn DirectorClient,
    assistant: &dyn AssistantPort,
    cfg: &SessionConfig,
    observer: &mut dyn FnMut(&SessionEvent),
) -> Result<SessionResult, EngineError> {
    cfg.validate()?;
    let mut trace = SessionTrace {
        case_id: case_id.to_string(),
        steps: Vec::new(),
        outcome: SessionOutcome::StepCapReached,
        director_calls: 0,
    };
    let result = drive(case_id, &mut transcript, &mut trace, director, assistant, cfg, observer);
    if let Err(e) = &result {
        observer(&SessionEvent::Failed { error: e.to_string() });
    }
    result.map(|()| SessionResult { transcript, trace })
}

fn drive(
    case_id: &str,
    transcript: &mut Transcript,
    trace: &mut SessionTrace,
    director: &dyn DirectorClient,
    assistant: &dyn AssistantPort,
    cfg: &SessionConfig,
    observer: &mut dyn FnMut(&SessionEvent),
) -> Result<(), EngineError> {
    if transcript.final_diagnosis.is_some() {
        trace.outcome = SessionOutcome::Finalized;
        return Ok(());
    }
    while transcript.steps.len() < cfg.step_cap {
        let started = Instant::now();
        let next = transcript.steps.len() + 1;
        let (cont, attempts) = request_continuation(director, transcript, &cfg.sampling, cfg.retry_limit, |attempt, e| {
            observer(&SessionEvent::DirectorRetry {
                step: next,
                attempt,
                error: e.to_string(),
            })
        })?;
        trace.director_calls += attempts;
        match cont {
            Continuation::Final(fd) => {
                observer(&SessionEvent::Finalized { body: fd.body.clone() });
                transcript.final_diagnosis = Some(fd);
                trace.outcome = SessionOutcome::Finalized;
                return Ok(());
            }
            Continuation::Step(step) => {
                let assistant_call = append_step(case_id, transcript, step, assistant, observer)?;
                trace.steps.push(StepTrace {
                    index: next,
                    responder: transcript.steps[next - 1].responder,
                    attempts,
                    assistant_call,
                    elapsed_ms: started.elapsed().as_millis() as u64,
                });
            }
        }
    }
    observer(&SessionEvent::StepCapReached {
        steps: transcript.steps.len(),
    });
    trace.outcome = SessionOutcome::StepCapReached;
    Ok(())
}

/// Appends a proposed step, routing `<Physician>` questions to the assistant.
pub fn append_step(
    case_id: &str,
    transcript: &mut Transcript,
    mut step: Step,
    assistant: &dyn AssistantPort,
    observer: &mut dyn FnMut(&SessionEvent),
) -> Result<Option<AssistantCall>, EngineError> {
    let index = step.index;
    let mut call = None;
    if step.responder == Responder::Physician {
        step.answer = None;
        observer(&SessionEvent::StepProposed { step: step.clone() });
        transcript.steps.push(step.clone());
        observer(&SessionEvent::AwaitingPhysician {
            step: index,
            question: step.question.clone(),
        });
        let answer = assistant.fulfill(&step.question, &AssistantContext { case_id, step: index })?;
        let answer = crate::text::collapse_whitespace(&answer);
        let answer = if answer.is_empty() {
            crate::oracle::NOT_MENTIONED.to_string()
        } else {
            answer
        };
        let answer = sanitize_answer(&answer);
        observer(&SessionEvent::AnswerRecorded {
            step: index,
            answer: answer.clone(),
        });
        transcript.steps[index - 1].answer = Some(answer.clone());
        call = Some(AssistantCall {
            request: step.question,
            answer,
        });
    } else {
        observer(&SessionEvent::StepProposed { step: step.clone() });
        transcript.steps.push(step);
    }
    Ok(call)
}

/// Physician input is free text; a leading `[` could read as a marker.
fn sanitize_answer(answer: &str) -> String {
    match answer.strip_prefix('[') {
        Some(rest) if rest.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) => format!("({rest}"),
        _ => answer.to_string(),
    }
}
