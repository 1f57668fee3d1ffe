//! Live sessions. Each session runs the engine on its own thread; physician
//! requests park the thread on a channel until `fulfill` delivers the
//! result or the physician timeout expires.
//!
//! Every engine event is appended to `<log_dir>/<session_id>.jsonl`, one
//! [`SessionEvent`] per line, before the in-memory view is updated.
//! Replaying a log with [`replay_events`] rebuilds the transcript.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use clinflow_core::engine::{
    apply_event, replay_events, run_session_observed, AssistantContext, AssistantError, AssistantPort, SessionEvent,
    SessionOutcome, SessionResult,
};
use clinflow_core::metrics::report::score_session;
use clinflow_core::metrics::EvalConfig;
use clinflow_core::oracle::{ClinicalOracle, OracleMode};
use clinflow_core::protocol::{emit_transcript, extract_final_answer, Transcript};
use clinflow_core::{CaseRecord, SessionConfig};

use crate::DirectorSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Running,
    AwaitingPhysician,
    Final,
    StepCapReached,
    Failed,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Final | SessionState::StepCapReached | SessionState::Failed)
    }
}

/// Who answers `<Physician>` requests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssistantKind {
    /// A human working through the console and `fulfill`.
    #[default]
    Console,
    /// The lexical oracle over the case's clinical information.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pending {
    pub step: usize,
    pub question: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FulfillError {
    #[error("session is {0:?}, not awaiting a physician")]
    NotAwaiting(SessionState),
    #[error("session is awaiting step {expected}, not step {found}")]
    WrongStep { expected: usize, found: usize },
    #[error("answer must be non-empty")]
    EmptyAnswer,
}

struct Inner {
    state: SessionState,
    transcript: Transcript,
    pending: Option<Pending>,
    error: Option<String>,
    events: Vec<SessionEvent>,
    result: Option<SessionResult>,
    log: Option<File>,
}

pub struct Session {
    pub id: String,
    pub case: CaseRecord,
    /// Whether the case came with clinical information and a gold answer.
    pub scored: bool,
    inner: Mutex<Inner>,
    answers: Mutex<Option<Sender<String>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub case_id: String,
    pub state: SessionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<Pending>,
    pub steps: usize,
    pub transcript: Transcript,
    pub transcript_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub case_id: String,
    pub state: SessionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<Pending>,
}

/// The per-session slice of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub case_id: String,
    pub state: SessionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    pub gamma: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_effectiveness: Option<f64>,
    pub steps: usize,
    pub judge_id: String,
}

impl Session {
    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("session state poisoned")
    }

    pub fn state(&self) -> SessionState {
        self.lock().state
    }

    pub fn view(&self) -> SessionView {
        let g = self.lock();
        SessionView {
            session_id: self.id.clone(),
            case_id: self.case.case_id.clone(),
            state: g.state,
            pending: g.pending.clone(),
            steps: g.transcript.steps.len(),
            transcript: g.transcript.clone(),
            transcript_text: emit_transcript(&g.transcript).unwrap_or_default(),
            error: g.error.clone(),
        }
    }

    pub fn summary(&self) -> SessionSummary {
        let g = self.lock();
        SessionSummary {
            session_id: self.id.clone(),
            case_id: self.case.case_id.clone(),
            state: g.state,
            pending: g.pending.clone(),
        }
    }

    pub fn events(&self) -> Vec<SessionEvent> {
        self.lock().events.clone()
    }

    /// Delivers a physician result. Calls are serialized on the session
    /// lock, so of two racing fulfils for the same step only one succeeds.
    pub fn fulfill(&self, step: usize, answer: &str) -> Result<SessionState, FulfillError> {
        if answer.trim().is_empty() {
            return Err(FulfillError::EmptyAnswer);
        }
        let mut g = self.lock();
        if g.state != SessionState::AwaitingPhysician {
            return Err(FulfillError::NotAwaiting(g.state));
        }
        let expected = g.pending.as_ref().map_or(0, |p| p.step);
        if expected != step {
            return Err(FulfillError::WrongStep { expected, found: step });
        }
        let sent = self
            .answers
            .lock()
            .expect("answer channel poisoned")
            .as_ref()
            .is_some_and(|tx| tx.send(answer.to_string()).is_ok());
        if !sent {
            return Err(FulfillError::NotAwaiting(g.state));
        }
        g.state = SessionState::Running;
        g.pending = None;
        Ok(g.state)
    }

    fn record(&self, event: &SessionEvent) {
        let mut g = self.lock();
        if let Some(f) = g.log.as_mut() {
            let line = serde_json::to_string(event).expect("events serialize");
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                g.error = Some(format!("event log write failed: {e}"));
            }
        }
        if let Err(e) = apply_event(&mut g.transcript, event) {
            g.error = Some(format!("event rejected: {e}"));
        }
        g.events.push(event.clone());
        match event {
            SessionEvent::AwaitingPhysician { step, question } => {
                g.state = SessionState::AwaitingPhysician;
                g.pending = Some(Pending {
                    step: *step,
                    question: question.clone(),
                });
            }
            SessionEvent::AnswerRecorded { .. } => {
                g.state = SessionState::Running;
                g.pending = None;
            }
            SessionEvent::Finalized { .. } => g.state = SessionState::Final,
            SessionEvent::StepCapReached { .. } => g.state = SessionState::StepCapReached,
            SessionEvent::Failed { error } => {
                g.state = SessionState::Failed;
                g.pending = None;
                g.error = Some(error.clone());
            }
            _ => {}
        }
    }

    fn finish(&self, result: Result<SessionResult, String>) {
        let mut g = self.lock();
        match result {
            Ok(r) => {
                g.state = match r.trace.outcome {
                    SessionOutcome::Finalized => SessionState::Final,
                    SessionOutcome::StepCapReached => SessionState::StepCapReached,
                };
                g.transcript = r.transcript.clone();
                g.result = Some(r);
            }
            Err(e) => {
                g.state = SessionState::Failed;
                g.error.get_or_insert(e);
            }
        }
        g.pending = None;
        self.answers.lock().expect("answer channel poisoned").take();
    }

    pub fn report(&self, eval: &EvalConfig) -> Option<Result<SessionReport, String>> {
        let g = self.lock();
        let result = g.result.as_ref()?;
        let mut report = SessionReport {
            session_id: self.id.clone(),
            case_id: self.case.case_id.clone(),
            state: g.state,
            predicted: extract_final_answer(&result.transcript).ok().filter(|p| !p.is_empty()),
            gold: None,
            correct: None,
            gamma: result.transcript.physician_count(),
            op_effectiveness: None,
            steps: result.transcript.steps.len(),
            judge_id: eval.accuracy.judge_id(),
        };
        if self.scored {
            match score_session(&self.case, result, eval) {
                Ok(row) => {
                    report.gold = Some(row.gold);
                    report.correct = Some(row.correct);
                    report.op_effectiveness = Some(row.op_effectiveness);
                }
                Err(e) => return Some(Err(e.to_string())),
            }
        }
        Some(Ok(report))
    }
}

/// Answers physician requests with whatever the console submits.
struct ConsoleAssistant {
    answers: Mutex<Receiver<String>>,
    timeout: Duration,
}

impl AssistantPort for ConsoleAssistant {
    fn fulfill(&self, _request: &str, _ctx: &AssistantContext<'_>) -> Result<String, AssistantError> {
        let rx = self.answers.lock().expect("answer receiver poisoned");
        match rx.recv_timeout(self.timeout) {
            Ok(a) => Ok(a),
            Err(RecvTimeoutError::Timeout) => Err(AssistantError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(AssistantError::Unavailable("session closed".into())),
        }
    }
}

pub struct SessionManager {
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    director: DirectorSource,
    session_cfg: SessionConfig,
    eval: EvalConfig,
    physician_timeout: Duration,
    log_dir: Option<PathBuf>,
}

impl SessionManager {
    pub fn new(
        director: DirectorSource,
        session_cfg: SessionConfig,
        eval: EvalConfig,
        physician_timeout: Duration,
        log_dir: Option<PathBuf>,
    ) -> Self {
        SessionManager {
            sessions: RwLock::new(BTreeMap::new()),
            director,
            session_cfg,
            eval,
            physician_timeout,
            log_dir,
        }
    }

    pub fn eval(&self) -> &EvalConfig {
        &self.eval
    }

    pub fn get(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().expect("session table poisoned").get(id).cloned()
    }

    pub fn list(&self, state: Option<SessionState>) -> Vec<SessionSummary> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .values()
            .map(|s| s.summary())
            .filter(|s| state.is_none_or(|want| s.state == want))
            .collect()
    }

    pub fn log_path(&self, id: &str) -> Option<PathBuf> {
        self.log_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")))
    }

    /// Creates the session and starts its engine thread.
    pub fn start(&self, case: CaseRecord, scored: bool, assistant: AssistantKind) -> std::io::Result<Arc<Session>> {
        let id = uuid::Uuid::new_v4().to_string();
        let log = match self.log_path(&id) {
            Some(p) => {
                if let Some(d) = p.parent() {
                    fs::create_dir_all(d)?;
                }
                Some(OpenOptions::new().create_new(true).append(true).open(p)?)
            }
            None => None,
        };
        let (tx, rx) = mpsc::channel();
        let session = Arc::new(Session {
            id: id.clone(),
            case,
            scored,
            inner: Mutex::new(Inner {
                state: SessionState::Running,
                transcript: Transcript::default(),
                pending: None,
                error: None,
                events: Vec::new(),
                result: None,
                log,
            }),
            answers: Mutex::new(Some(tx)),
        });
        self.sessions
            .write()
            .expect("session table poisoned")
            .insert(id, Arc::clone(&session));

        let director = self.director.for_case(&session.case.case_id);
        let cfg = self.session_cfg.clone();
        let assistant: Box<dyn AssistantPort> = match assistant {
            AssistantKind::Console => Box::new(ConsoleAssistant {
                answers: Mutex::new(rx),
                timeout: self.physician_timeout,
            }),
            AssistantKind::Oracle => {
                let mut doc = session.case.clinical_info.clone();
                doc.case_id = session.case.case_id.clone();
                Box::new(ClinicalOracle::with_docs(OracleMode::Lexical, [doc]))
            }
        };
        let worker = Arc::clone(&session);
        std::thread::Builder::new()
            .name(format!("session-{}", &worker.id[..8]))
            .spawn(move || {
                let result = run_session_observed(&worker.case, director.as_ref(), assistant.as_ref(), &cfg, &mut |e| {
                    worker.record(e)
                });
                worker.finish(result.map_err(|e| e.to_string()));
            })?;
        Ok(session)
    }
}

pub fn read_event_log(path: &Path) -> anyhow::Result<Vec<SessionEvent>> {
    let mut events = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line).map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))?);
    }
    Ok(events)
}

pub fn replay_log(path: &Path) -> anyhow::Result<Transcript> {
    Ok(replay_events(&read_event_log(path)?)?)
}
