//! Transcript grammar: parser and canonical emitter.
//!
//! A transcript is line oriented. The text before the first marker is the
//! instruction (chief complaint plus clinical question). Each step is a group
//! of marker lines:
//!
//! ```text
//! [Deep Think] 1: ...
//! [Question] 1 <LLM>: ...
//! [Answer] 1: ...
//! ```
//!
//! followed by an optional `[Final Diagnosis]:` block (inline step references
//! written `[k]`) and an optional `[References]:` block with one `[k] citation`
//! line per step. Blocks are separated by one blank line. Field content may
//! span several lines and runs until the next marker line.
//!
//! The `[Deep Think]` line may be absent; such a step is a draft awaiting
//! deep-thinking injection and parses with an empty `deep_think`.

use std::fmt;
use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The literal sentence prefix that introduces the short answer.
pub const ANSWER_PREFIX: &str = "So the final answer is";

const FINAL_MARKER: &str = "[Final Diagnosis]:";
const FINAL_ALIAS: &str = "[Final Content]:";
const REFERENCES_MARKER: &str = "[References]:";

static DEEP_THINK_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\[Deep Think\] (\d+):(?: (.*))?$").unwrap());
static QUESTION_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\[Question\] (\d+) <(LLM|Physician)>:(?: (.*))?$").unwrap()
});
static ANSWER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\[Answer\] (\d+):(?: (.*))?$").unwrap());
static MARKER_LIKE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\[[A-Za-z][^\]]*\]").unwrap());
static REFERENCE_LINE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\[(\d+)\] (.+)$").unwrap());
static STEP_REF_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[(\d+)\]").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("line {line}: malformed or unknown marker `{text}`")]
    MalformedMarker { line: usize, text: String },
    #[error("non-contiguous step index: expected {expected}, found {found}")]
    NonContiguousIndex { expected: usize, found: usize },
    #[error("final diagnosis contains more than one `{ANSWER_PREFIX}` line")]
    DuplicateAnswerLine,
    #[error("line {line}: `{marker}` is not allowed here")]
    UnexpectedMarker { line: usize, marker: String },
    #[error("more than one final diagnosis block")]
    DuplicateFinal,
    #[error("final diagnosis present but step {0} has no answer")]
    IncompleteStep(usize),
    #[error("step reference [{0}] does not name a step of this transcript")]
    InvalidStepRef(usize),
    #[error("line {line}: malformed reference entry `{text}`")]
    MalformedReference { line: usize, text: String },
    #[error("reference for step {0} given twice")]
    DuplicateReference(usize),
    #[error("transcript has no final diagnosis")]
    MissingFinal,
    #[error("final diagnosis has no `{ANSWER_PREFIX}` line")]
    MissingAnswerLine,
    #[error("step {0} has no deep-think content")]
    MissingDeepThink(usize),
    #[error("LLM step {0} has no answer")]
    MissingAnswer(usize),
    #[error("no step or final diagnosis found in continuation")]
    EmptyContinuation,
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Responder {
    #[serde(rename = "LLM")]
    Llm,
    Physician,
}

impl Responder {
    pub fn tag(self) -> &'static str {
        match self {
            Responder::Llm => "LLM",
            Responder::Physician => "Physician",
        }
    }
}

impl fmt::Display for Responder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub deep_think: String,
    pub question: String,
    pub responder: Responder,
    #[serde(default)]
    pub answer: Option<String>,
}

impl Step {
    pub fn is_completed(&self) -> bool {
        self.answer.as_deref().is_some_and(|a| !a.is_empty())
    }
}

/// Summary block closing a transcript.
///
/// `step_refs` and `answer_line` are derived from `body`; deserialization
/// recomputes them and rejects inconsistent input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FinalDiagnosisRepr")]
pub struct FinalDiagnosis {
    pub body: String,
    pub step_refs: Vec<usize>,
    pub answer_line: Option<String>,
}

#[derive(Deserialize)]
struct FinalDiagnosisRepr {
    body: String,
    #[serde(default)]
    step_refs: Option<Vec<usize>>,
    #[serde(default)]
    answer_line: Option<String>,
}

impl TryFrom<FinalDiagnosisRepr> for FinalDiagnosis {
    type Error = ProtocolError;

    fn try_from(repr: FinalDiagnosisRepr) -> Result<Self, Self::Error> {
        let fd = FinalDiagnosis::new(repr.body)?;
        if let Some(refs) = repr.step_refs {
            if refs != fd.step_refs {
                return Err(ProtocolError::InvariantViolation(
                    "step_refs disagree with final body".into(),
                ));
            }
        }
        if repr.answer_line.is_some() && repr.answer_line != fd.answer_line {
            return Err(ProtocolError::InvariantViolation(
                "answer_line disagrees with final body".into(),
            ));
        }
        Ok(fd)
    }
}

impl FinalDiagnosis {
    pub fn new(body: impl Into<String>) -> Result<Self, ProtocolError> {
        let body = body.into();
        let mut step_refs = Vec::new();
        for cap in STEP_REF_RE.captures_iter(&body) {
            if let Ok(k) = cap[1].parse::<usize>() {
                if !step_refs.contains(&k) {
                    step_refs.push(k);
                }
            }
        }
        let mut hits = body.match_indices(ANSWER_PREFIX);
        let answer_line = match (hits.next(), hits.next()) {
            (None, _) => None,
            (Some(_), Some(_)) => return Err(ProtocolError::DuplicateAnswerLine),
            (Some((at, _)), None) => {
                let rest = &body[at..];
                let end = rest.find('\n').unwrap_or(rest.len());
                Some(rest[..end].trim_end().to_string())
            }
        };
        Ok(FinalDiagnosis {
            body,
            step_refs,
            answer_line,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    pub step: usize,
    pub citation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Transcript {
    pub instruction: String,
    #[serde(default)]
    pub steps: Vec<Step>,
    #[serde(rename = "final", default)]
    pub final_diagnosis: Option<FinalDiagnosis>,
    #[serde(default)]
    pub references: Vec<Reference>,
}

impl Transcript {
    pub fn new(instruction: impl Into<String>) -> Self {
        Transcript {
            instruction: instruction.into(),
            ..Default::default()
        }
    }

    pub fn physician_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.responder == Responder::Physician)
            .count()
    }

    pub fn step(&self, index: usize) -> Option<&Step> {
        index.checked_sub(1).and_then(|i| self.steps.get(i))
    }

    /// Checks every structural invariant the emitter relies on.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        check_content("instruction", &self.instruction, true)?;
        for (i, step) in self.steps.iter().enumerate() {
            if step.index != i + 1 {
                return Err(ProtocolError::NonContiguousIndex {
                    expected: i + 1,
                    found: step.index,
                });
            }
            check_content("deep_think", &step.deep_think, true)?;
            if step.question.is_empty() {
                return Err(ProtocolError::InvariantViolation(format!(
                    "step {} has an empty question",
                    step.index
                )));
            }
            check_content("question", &step.question, false)?;
            if let Some(answer) = &step.answer {
                check_content("answer", answer, false)?;
            }
        }
        if let Some(fd) = &self.final_diagnosis {
            check_content("final", &fd.body, false)?;
            let recomputed = FinalDiagnosis::new(fd.body.clone())?;
            if recomputed != *fd {
                return Err(ProtocolError::InvariantViolation(
                    "final diagnosis fields disagree with body".into(),
                ));
            }
            if let Some(step) = self.steps.iter().find(|s| !s.is_completed()) {
                return Err(ProtocolError::IncompleteStep(step.index));
            }
            if let Some(&k) = fd
                .step_refs
                .iter()
                .find(|&&k| k == 0 || k > self.steps.len())
            {
                return Err(ProtocolError::InvalidStepRef(k));
            }
        }
        let mut last = 0;
        for r in &self.references {
            if r.step == 0 || r.step > self.steps.len() {
                return Err(ProtocolError::InvalidStepRef(r.step));
            }
            if r.step <= last {
                return Err(if r.step == last {
                    ProtocolError::DuplicateReference(r.step)
                } else {
                    ProtocolError::InvariantViolation("references not ordered by step".into())
                });
            }
            if r.citation.is_empty() || r.citation.contains('\n') || r.citation.trim() != r.citation
            {
                return Err(ProtocolError::InvariantViolation(format!(
                    "citation for step {} must be a single trimmed line",
                    r.step
                )));
            }
            last = r.step;
        }
        Ok(())
    }
}

/// Checks that `text` can be stored in a non-empty transcript field and
/// survive a round trip.
pub fn check_field(field: &str, text: &str) -> Result<(), ProtocolError> {
    check_content(field, text, false)
}

fn check_content(field: &str, text: &str, may_be_empty: bool) -> Result<(), ProtocolError> {
    if text.is_empty() {
        return if may_be_empty {
            Ok(())
        } else {
            Err(ProtocolError::InvariantViolation(format!("{field} is empty")))
        };
    }
    if text.trim() != text {
        return Err(ProtocolError::InvariantViolation(format!(
            "{field} has leading or trailing whitespace"
        )));
    }
    if text.contains('\r') {
        return Err(ProtocolError::InvariantViolation(format!(
            "{field} contains a carriage return"
        )));
    }
    if text.lines().any(|l| MARKER_LIKE_RE.is_match(l)) {
        return Err(ProtocolError::InvariantViolation(format!(
            "{field} contains a line that reads as a marker"
        )));
    }
    Ok(())
}

/// Which part of a step a content span belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    DeepThink,
    Question,
    Answer,
    Final,
}

/// Byte range of one field's content inside emitted text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpan {
    pub kind: FieldKind,
    pub step: Option<usize>,
    pub range: Range<usize>,
}

pub fn emit_transcript(t: &Transcript) -> Result<String, ProtocolError> {
    emit_with_layout(t).map(|(text, _)| text)
}

/// Emits canonical text together with the byte range of every content field.
pub fn emit_with_layout(t: &Transcript) -> Result<(String, Vec<FieldSpan>), ProtocolError> {
    t.validate()?;
    let mut out = String::new();
    let mut spans = Vec::new();
    let mut first_block = true;
    let mut start_block = |out: &mut String| {
        if !first_block {
            out.push_str("\n\n");
        }
        first_block = false;
    };

    if !t.instruction.is_empty() {
        start_block(&mut out);
        out.push_str(&t.instruction);
    }
    for step in &t.steps {
        start_block(&mut out);
        let mut push_field = |out: &mut String, header: String, kind: FieldKind, text: &str| {
            out.push_str(&header);
            out.push(' ');
            let s = out.len();
            out.push_str(text);
            spans.push(FieldSpan {
                kind,
                step: Some(step.index),
                range: s..out.len(),
            });
        };
        if !step.deep_think.is_empty() {
            push_field(
                &mut out,
                format!("[Deep Think] {}:", step.index),
                FieldKind::DeepThink,
                &step.deep_think,
            );
            out.push('\n');
        }
        push_field(
            &mut out,
            format!("[Question] {} <{}>:", step.index, step.responder),
            FieldKind::Question,
            &step.question,
        );
        if let Some(answer) = &step.answer {
            out.push('\n');
            push_field(
                &mut out,
                format!("[Answer] {}:", step.index),
                FieldKind::Answer,
                answer,
            );
        }
    }
    if let Some(fd) = &t.final_diagnosis {
        start_block(&mut out);
        out.push_str(FINAL_MARKER);
        out.push(' ');
        let s = out.len();
        out.push_str(&fd.body);
        spans.push(FieldSpan {
            kind: FieldKind::Final,
            step: None,
            range: s..out.len(),
        });
    }
    if !t.references.is_empty() {
        start_block(&mut out);
        out.push_str(REFERENCES_MARKER);
        for r in &t.references {
            out.push_str(&format!("\n[{}] {}", r.step, r.citation));
        }
    }
    if !out.is_empty() {
        out.push('\n');
    }
    Ok((out, spans))
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Line<'a> {
    DeepThink(usize, &'a str),
    Question(usize, Responder, &'a str),
    Answer(usize, &'a str),
    Final(&'a str),
    References,
    Content(&'a str),
}

fn classify(lineno: usize, line: &str) -> Result<Line<'_>, ProtocolError> {
    let index = |s: &str| {
        s.parse::<usize>().map_err(|_| ProtocolError::MalformedMarker {
            line: lineno,
            text: line.to_string(),
        })
    };
    if let Some(c) = DEEP_THINK_RE.captures(line) {
        let rest = c.get(2).map_or("", |m| m.as_str());
        return Ok(Line::DeepThink(index(&c[1])?, rest));
    }
    if let Some(c) = QUESTION_RE.captures(line) {
        let responder = if &c[2] == "LLM" {
            Responder::Llm
        } else {
            Responder::Physician
        };
        let rest = c.get(3).map_or("", |m| m.as_str());
        return Ok(Line::Question(index(&c[1])?, responder, rest));
    }
    if let Some(c) = ANSWER_RE.captures(line) {
        let rest = c.get(2).map_or("", |m| m.as_str());
        return Ok(Line::Answer(index(&c[1])?, rest));
    }
    for marker in [FINAL_MARKER, FINAL_ALIAS] {
        if let Some(rest) = line.strip_prefix(marker) {
            return Ok(Line::Final(rest.strip_prefix(' ').unwrap_or(rest)));
        }
    }
    if let Some(rest) = line.strip_prefix(REFERENCES_MARKER) {
        if rest.trim().is_empty() {
            return Ok(Line::References);
        }
    }
    if MARKER_LIKE_RE.is_match(line) {
        return Err(ProtocolError::MalformedMarker {
            line: lineno,
            text: line.to_string(),
        });
    }
    Ok(Line::Content(line))
}

fn split_lines(text: &str) -> Vec<String> {
    let normalized = text.replace("\r\n", "\n");
    let mut lines: Vec<String> = normalized.split('\n').map(str::to_string).collect();
    if normalized.ends_with('\n') {
        lines.pop();
    }
    lines
}

/// A marker plus the content lines that follow it.
struct Field<'a> {
    lineno: usize,
    head: Line<'a>,
    body: String,
}

fn collect_fields<'a>(lines: &'a [String]) -> Result<(String, Vec<Field<'a>>), ProtocolError> {
    let mut preamble: Vec<&str> = Vec::new();
    let mut fields: Vec<Field<'a>> = Vec::new();
    let mut in_references = false;
    for (i, raw) in lines.iter().enumerate() {
        let lineno = i + 1;
        if in_references {
            fields.push(Field {
                lineno,
                head: Line::Content(raw),
                body: raw.clone(),
            });
            continue;
        }
        match classify(lineno, raw)? {
            Line::Content(c) => match fields.last_mut() {
                Some(f) => {
                    f.body.push('\n');
                    f.body.push_str(c);
                }
                None => preamble.push(c),
            },
            head => {
                let first = match head {
                    Line::DeepThink(_, r) | Line::Question(_, _, r) | Line::Answer(_, r) => r,
                    Line::Final(r) => r,
                    Line::References => {
                        in_references = true;
                        ""
                    }
                    Line::Content(_) => unreachable!(),
                };
                fields.push(Field {
                    lineno,
                    head,
                    body: first.to_string(),
                });
            }
        }
    }
    Ok((preamble.join("\n").trim().to_string(), fields))
}

pub fn parse_transcript(text: &str) -> Result<Transcript, ProtocolError> {
    let lines = split_lines(text);
    let (instruction, fields) = collect_fields(&lines)?;
    let mut t = Transcript::new(instruction);
    let mut pending: Option<Step> = None;
    let mut iter = fields.into_iter().peekable();

    let flush = |t: &mut Transcript, pending: &mut Option<Step>| {
        if let Some(s) = pending.take() {
            t.steps.push(s);
        }
    };

    while let Some(field) = iter.next() {
        let content = field.body.trim().to_string();
        let unexpected = |marker: &str| ProtocolError::UnexpectedMarker {
            line: field.lineno,
            marker: marker.to_string(),
        };
        let sealed = t.final_diagnosis.is_some();
        match field.head {
            Line::DeepThink(n, _) => {
                if sealed {
                    return Err(unexpected("[Deep Think]"));
                }
                flush(&mut t, &mut pending);
                expect_index(t.steps.len() + 1, n)?;
                let Some(next) = iter.next() else {
                    return Err(unexpected("[Deep Think]"));
                };
                let Line::Question(qn, responder, _) = next.head else {
                    return Err(ProtocolError::UnexpectedMarker {
                        line: next.lineno,
                        marker: "expected [Question] after [Deep Think]".into(),
                    });
                };
                expect_index(n, qn)?;
                pending = Some(Step {
                    index: n,
                    deep_think: content,
                    question: next.body.trim().to_string(),
                    responder,
                    answer: None,
                });
            }
            Line::Question(n, responder, _) => {
                if sealed {
                    return Err(unexpected("[Question]"));
                }
                flush(&mut t, &mut pending);
                expect_index(t.steps.len() + 1, n)?;
                pending = Some(Step {
                    index: n,
                    deep_think: String::new(),
                    question: content,
                    responder,
                    answer: None,
                });
            }
            Line::Answer(n, _) => match pending.as_mut() {
                Some(step) if step.answer.is_none() => {
                    expect_index(step.index, n)?;
                    step.answer = Some(content);
                }
                _ => return Err(unexpected("[Answer]")),
            },
            Line::Final(_) => {
                if sealed {
                    return Err(ProtocolError::DuplicateFinal);
                }
                flush(&mut t, &mut pending);
                t.final_diagnosis = Some(FinalDiagnosis::new(content)?);
            }
            Line::References => {
                flush(&mut t, &mut pending);
                for entry in iter.by_ref() {
                    let line = entry.body.trim_end();
                    if line.trim().is_empty() {
                        continue;
                    }
                    let Some(c) = REFERENCE_LINE_RE.captures(line) else {
                        return Err(ProtocolError::MalformedReference {
                            line: entry.lineno,
                            text: line.to_string(),
                        });
                    };
                    let step: usize = c[1].parse().map_err(|_| ProtocolError::MalformedReference {
                        line: entry.lineno,
                        text: line.to_string(),
                    })?;
                    if t.references.iter().any(|r| r.step == step) {
                        return Err(ProtocolError::DuplicateReference(step));
                    }
                    t.references.push(Reference {
                        step,
                        citation: c[2].trim().to_string(),
                    });
                }
                t.references.sort_by_key(|r| r.step);
            }
            Line::Content(_) => unreachable!("content lines are folded into fields"),
        }
    }
    flush(&mut t, &mut pending);
    t.validate()?;
    Ok(t)
}

fn expect_index(expected: usize, found: usize) -> Result<(), ProtocolError> {
    if expected == found {
        Ok(())
    } else {
        Err(ProtocolError::NonContiguousIndex { expected, found })
    }
}

/// What a director produced for the next turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Continuation {
    Step(Step),
    Final(FinalDiagnosis),
}

/// Parses one director turn: either the step numbered `next_index` or a final
/// diagnosis. Preamble chatter before the first marker is ignored, as is
/// anything after the first complete block.
pub fn parse_continuation(text: &str, next_index: usize) -> Result<Continuation, ProtocolError> {
    let lines = split_lines(text);
    let (_, fields) = collect_fields(&lines)?;
    let mut iter = fields.into_iter();
    let Some(first) = iter.next() else {
        return Err(ProtocolError::EmptyContinuation);
    };
    match first.head {
        Line::Final(_) => Ok(Continuation::Final(FinalDiagnosis::new(
            first.body.trim().to_string(),
        )?)),
        Line::DeepThink(n, _) => {
            expect_index(next_index, n)?;
            let deep_think = first.body.trim().to_string();
            if deep_think.is_empty() {
                return Err(ProtocolError::MissingDeepThink(n));
            }
            let Some(q) = iter.next() else {
                return Err(ProtocolError::UnexpectedMarker {
                    line: first.lineno,
                    marker: "[Deep Think] without [Question]".into(),
                });
            };
            let Line::Question(qn, responder, _) = q.head else {
                return Err(ProtocolError::UnexpectedMarker {
                    line: q.lineno,
                    marker: "expected [Question] after [Deep Think]".into(),
                });
            };
            expect_index(n, qn)?;
            let question = q.body.trim().to_string();
            if question.is_empty() {
                return Err(ProtocolError::InvariantViolation(format!(
                    "step {n} has an empty question"
                )));
            }
            let answer = match iter.next() {
                Some(Field {
                    head: Line::Answer(an, _),
                    body,
                    ..
                }) if an == n => Some(body.trim().to_string()).filter(|a| !a.is_empty()),
                _ => None,
            };
            let answer = match responder {
                Responder::Llm => Some(answer.ok_or(ProtocolError::MissingAnswer(n))?),
                // Physician results come from the assistant, never from the director.
                Responder::Physician => None,
            };
            let step = Step {
                index: n,
                deep_think,
                question,
                responder,
                answer,
            };
            check_content("deep_think", &step.deep_think, false)?;
            check_content("question", &step.question, false)?;
            if let Some(a) = &step.answer {
                check_content("answer", a, false)?;
            }
            Ok(Continuation::Step(step))
        }
        Line::Question(n, _, _) => Err(ProtocolError::MissingDeepThink(n)),
        _ => Err(ProtocolError::UnexpectedMarker {
            line: first.lineno,
            marker: "continuation must start with [Deep Think] or [Final Diagnosis]".into(),
        }),
    }
}

/// Returns the short answer following [`ANSWER_PREFIX`], without trailing
/// punctuation or inline step references.
pub fn extract_final_answer(t: &Transcript) -> Result<String, ProtocolError> {
    let fd = t.final_diagnosis.as_ref().ok_or(ProtocolError::MissingFinal)?;
    answer_from_final(fd)
}

pub fn answer_from_final(fd: &FinalDiagnosis) -> Result<String, ProtocolError> {
    let line = fd
        .answer_line
        .as_deref()
        .ok_or(ProtocolError::MissingAnswerLine)?;
    let rest = &line[ANSWER_PREFIX.len()..];
    let rest = STEP_REF_RE.replace_all(rest, "");
    let rest = rest.trim_start_matches(|c: char| c == ':' || c.is_whitespace());
    let trimmed =
        rest.trim_end_matches(|c: char| c.is_whitespace() || matches!(c, '.' | '!' | '?' | ';' | ',' | ':'));
    Ok(trimmed.split_whitespace().collect::<Vec<_>>().join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_step() -> &'static str {
        "I have had belly pain since last night.\nWhat is the diagnosis?\n\n\
         [Deep Think] 1: Epigastric pain needs lab work.\n\
         [Question] 1 <Physician>: Please measure serum lipase.\n\
         [Answer] 1: Lipase 1200 U/L.\n\n\
         [Deep Think] 2: Lipase is markedly elevated.\n\
         [Question] 2 <LLM>: What does lipase above three times normal suggest?\n\
         [Answer] 2: Acute pancreatitis.\n\n\
         [Final Diagnosis]: Lipase was high [1], which indicates pancreatitis [2]. So the final answer is acute pancreatitis.\n"
    }

    #[test]
    fn parses_steps_and_final() {
        let t = parse_transcript(two_step()).unwrap();
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.final_diagnosis.as_ref().unwrap().step_refs, vec![1, 2]);
        assert_eq!(t.steps[0].responder, Responder::Physician);
        assert_eq!(emit_transcript(&t).unwrap(), two_step());
    }

    #[test]
    fn rejects_gap_in_indices() {
        let text = "Q\n\n[Question] 1 <LLM>: a\n[Answer] 1: b\n\n[Question] 3 <LLM>: c\n[Answer] 3: d\n";
        assert_eq!(
            parse_transcript(text),
            Err(ProtocolError::NonContiguousIndex {
                expected: 2,
                found: 3
            })
        );
    }

    #[test]
    fn rejects_unknown_marker() {
        let err = parse_transcript("Q\n\n[Thought] 1: x\n").unwrap_err();
        assert!(matches!(err, ProtocolError::MalformedMarker { line: 3, .. }));
        let err = parse_transcript("Q\n\n[Question] 1 <Nurse>: x\n").unwrap_err();
        assert!(matches!(err, ProtocolError::MalformedMarker { .. }));
    }

    #[test]
    fn rejects_two_answer_lines() {
        let text = "Q\n\n[Question] 1 <LLM>: a\n[Answer] 1: b\n\n[Final Diagnosis]: So the final answer is x.\nSo the final answer is y.\n";
        assert_eq!(parse_transcript(text), Err(ProtocolError::DuplicateAnswerLine));
    }

    #[test]
    fn final_content_alias_emits_canonical_marker() {
        let text = "Q\n\n[Question] 1 <LLM>: a\n[Answer] 1: b\n\n[Final Content]: So the final answer is x [1].\n";
        let t = parse_transcript(text).unwrap();
        let out = emit_transcript(&t).unwrap();
        assert!(out.contains("[Final Diagnosis]: So the final answer is x [1]."));
        assert_eq!(extract_final_answer(&t).unwrap(), "x");
    }

    #[test]
    fn crlf_is_normalized() {
        let crlf = two_step().replace('\n', "\r\n");
        let t = parse_transcript(&crlf).unwrap();
        assert_eq!(emit_transcript(&t).unwrap(), two_step());
    }

    #[test]
    fn instruction_only() {
        let t = Transcript::new("My chest hurts. What is going on?");
        assert_eq!(emit_transcript(&t).unwrap(), "My chest hurts. What is going on?\n");
        assert_eq!(parse_transcript("My chest hurts. What is going on?\n").unwrap(), t);
    }

    #[test]
    fn references_are_emitted_in_step_order() {
        let mut t = parse_transcript(two_step()).unwrap();
        t.steps.push(Step {
            index: 3,
            deep_think: "d".into(),
            question: "q".into(),
            responder: Responder::Llm,
            answer: Some("a".into()),
        });
        t.references = vec![
            Reference { step: 1, citation: "Physician: lipase".into() },
            Reference { step: 2, citation: "PubMed 77: pancreatitis".into() },
            Reference { step: 3, citation: "StatPearls 5: x".into() },
        ];
        let out = emit_transcript(&t).unwrap();
        let tail = out.split("[References]:\n").nth(1).unwrap();
        let keys: Vec<&str> = tail.lines().map(|l| &l[..3]).collect();
        assert_eq!(keys, ["[1]", "[2]", "[3]"]);
        // Shuffled input parses back sorted.
        let shuffled = out.replace(
            "[1] Physician: lipase\n[2] PubMed 77: pancreatitis\n",
            "[2] PubMed 77: pancreatitis\n[1] Physician: lipase\n",
        );
        assert_eq!(parse_transcript(&shuffled).unwrap(), t);
        t.references.swap(0, 1);
        assert!(emit_transcript(&t).is_err());
    }

    #[test]
    fn final_requires_completed_steps() {
        let text = "Q\n\n[Deep Think] 1: x\n[Question] 1 <Physician>: y\n\n[Final Diagnosis]: So the final answer is z.\n";
        assert_eq!(parse_transcript(text), Err(ProtocolError::IncompleteStep(1)));
    }

    #[test]
    fn out_of_range_step_ref() {
        let text = "Q\n\n[Question] 1 <LLM>: a\n[Answer] 1: b\n\n[Final Diagnosis]: see [2]. So the final answer is z.\n";
        assert_eq!(parse_transcript(text), Err(ProtocolError::InvalidStepRef(2)));
    }

    #[test]
    fn multiline_content_round_trips() {
        let text = "Line one.\n\nLine three.\n\n[Deep Think] 1: first\n\nsecond paragraph\n[Question] 1 <LLM>: q\n[Answer] 1: a\n";
        let t = parse_transcript(text).unwrap();
        assert_eq!(t.instruction, "Line one.\n\nLine three.");
        assert_eq!(t.steps[0].deep_think, "first\n\nsecond paragraph");
        assert_eq!(emit_transcript(&t).unwrap(), text);
    }

    #[test]
    fn extract_answer_strips_punctuation() {
        let fd = FinalDiagnosis::new("Findings fit. So the final answer is acute pancreatitis.").unwrap();
        let t = Transcript {
            instruction: "q".into(),
            final_diagnosis: Some(fd),
            ..Default::default()
        };
        assert_eq!(extract_final_answer(&t).unwrap(), "acute pancreatitis");
        assert_eq!(
            extract_final_answer(&Transcript::new("q")),
            Err(ProtocolError::MissingFinal)
        );
        let no_line = Transcript {
            instruction: "q".into(),
            final_diagnosis: Some(FinalDiagnosis::new("Unclear.").unwrap()),
            ..Default::default()
        };
        assert_eq!(extract_final_answer(&no_line), Err(ProtocolError::MissingAnswerLine));
    }

    #[test]
    fn continuation_parsing() {
        let c = parse_continuation(
            "Sure.\n[Deep Think] 3: think\n[Question] 3 <Physician>: Measure BP.\n[Answer] 3: invented\n\n[Deep Think] 4: more",
            3,
        )
        .unwrap();
        match c {
            Continuation::Step(s) => {
                assert_eq!(s.index, 3);
                assert_eq!(s.answer, None);
                assert_eq!(s.question, "Measure BP.");
            }
            _ => panic!("expected step"),
        }
        assert_eq!(
            parse_continuation("[Deep Think] 1: t\n[Question] 1 <LLM>: q", 1),
            Err(ProtocolError::MissingAnswer(1))
        );
        assert!(matches!(
            parse_continuation("[Final Diagnosis]: So the final answer is x.", 5),
            Ok(Continuation::Final(_))
        ));
        assert_eq!(parse_continuation("just words", 1), Err(ProtocolError::EmptyContinuation));
        assert!(matches!(
            parse_continuation("[Deep Think] 2: t\n[Question] 2 <LLM>: q\n[Answer] 2: a", 1),
            Err(ProtocolError::NonContiguousIndex { .. })
        ));
    }

    #[test]
    fn json_uses_type_field_names() {
        let t = parse_transcript(two_step()).unwrap();
        let v = serde_json::to_value(&t).unwrap();
        assert_eq!(v["steps"][0]["responder"], "Physician");
        assert_eq!(v["steps"][1]["responder"], "LLM");
        assert_eq!(v["final"]["step_refs"], serde_json::json!([1, 2]));
        let back: Transcript = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, t);
        let mut bad = v;
        bad["final"]["step_refs"] = serde_json::json!([2]);
        assert!(serde_json::from_value::<Transcript>(bad).is_err());
    }
}
