//! Case records and the model-assisted data-construction pipeline.
//!
//! A raw QA record goes through three model stages (clinical-information
//! extraction, chief-complaint rewrite, open-ended question rephrase), then a
//! stepwise conversion into an initial question/answer response, then
//! deep-thinking injection one step at a time. Every model call is keyed by
//! `(case_id, stage)` in a [`StageCache`], so an interrupted run resumes
//! without repeating calls and the cache doubles as the audit log.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{JudgeClient, ModelError};
use crate::oracle::{ClinicalInfoDoc, Section};
use crate::prompts::{self, PromptTemplate};
use crate::protocol::{emit_transcript, parse_transcript, ProtocolError, Transcript};
use crate::text::alnum_tokens;

/// Shortest verbatim token run that counts as leaking a later answer.
pub const LEAKAGE_SPAN_TOKENS: usize = 8;

#[derive(Debug, Error)]
pub enum CaseBankError {
    #[error("line {line}: {message}")]
    SchemaError { line: usize, message: String },
    #[error("line {line}: duplicate case_id `{case_id}`")]
    DuplicateCaseId { line: usize, case_id: String },
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(#[from] ModelError),
    #[error("case {0}: clinical-information extraction returned nothing")]
    ExtractionEmpty(String),
    #[error("case {case_id}: model returned empty output for stage {stage}")]
    EmptyModelOutput { case_id: String, stage: String },
    #[error("case {case_id}: stepwise conversion is not a valid response: {reason}")]
    InvalidConversion { case_id: String, reason: String },
    #[error("deep thinking of step {0} repeats a later answer verbatim")]
    LeakageDetected(usize),
    #[error("deep thinking of step {step} is unusable: {reason}")]
    InvalidDeepThink { step: usize, reason: String },
    #[error("pair precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CaseBankError + '_ {
    move |source| CaseBankError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub question: String,
    pub chief_complaint: String,
    pub clinical_info: ClinicalInfoDoc,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub department: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

impl CaseRecord {
    /// Chief complaint followed by the clinical question.
    pub fn instruction(&self) -> String {
        format!("{}\n{}", self.chief_complaint.trim(), self.question.trim())
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, value) in [
            ("case_id", &self.case_id),
            ("question", &self.question),
            ("chief_complaint", &self.chief_complaint),
            ("gold_answer", &self.gold_answer),
        ] {
            if value.trim().is_empty() {
                return Err(format!("{name} must be non-empty"));
            }
        }
        if !self.clinical_info.case_id.is_empty() && self.clinical_info.case_id != self.case_id {
            return Err(format!(
                "clinical_info.case_id `{}` differs from case_id `{}`",
                self.clinical_info.case_id, self.case_id
            ));
        }
        self.clinical_info.validate()?;
        let mut probe = Transcript::new(self.instruction());
        probe.steps.clear();
        emit_transcript(&probe).map_err(|e| format!("instruction: {e}"))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct CaseBank {
    cases: Vec<CaseRecord>,
    by_id: HashMap<String, usize>,
}

impl CaseBank {
    pub fn from_records(records: Vec<CaseRecord>) -> Result<Self, CaseBankError> {
        let mut bank = CaseBank::default();
        for (i, mut r) in records.into_iter().enumerate() {
            let line = i + 1;
            if r.clinical_info.case_id.is_empty() {
                r.clinical_info.case_id = r.case_id.clone();
            }
            r.validate()
                .map_err(|message| CaseBankError::SchemaError { line, message })?;
            if bank.by_id.contains_key(&r.case_id) {
                return Err(CaseBankError::DuplicateCaseId {
                    line,
                    case_id: r.case_id,
                });
            }
            bank.by_id.insert(r.case_id.clone(), bank.cases.len());
            bank.cases.push(r);
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn get(&self, case_id: &str) -> Option<&CaseRecord> {
        self.by_id.get(case_id).map(|&i| &self.cases[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CaseRecord> {
        self.cases.iter()
    }

    pub fn cases(&self) -> &[CaseRecord] {
        &self.cases
    }
}

/// Reads one CaseRecord per JSONL line. Blank lines are skipped but counted.
pub fn parse_cases(reader: impl BufRead) -> Result<CaseBank, CaseBankError> {
    let mut bank = CaseBank::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| CaseBankError::SchemaError {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut record: CaseRecord = serde_json::from_str(&line).map_err(|e| CaseBankError::SchemaError {
            line: lineno,
            message: e.to_string(),
        })?;
        if record.clinical_info.case_id.is_empty() {
            record.clinical_info.case_id = record.case_id.clone();
        }
        record
            .validate()
            .map_err(|message| CaseBankError::SchemaError { line: lineno, message })?;
        if bank.by_id.contains_key(&record.case_id) {
            return Err(CaseBankError::DuplicateCaseId {
                line: lineno,
                case_id: record.case_id,
            });
        }
        bank.by_id.insert(record.case_id.clone(), bank.cases.len());
        bank.cases.push(record);
    }
    Ok(bank)
}

pub fn ingest_cases(path: &Path) -> Result<CaseBank, CaseBankError> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_cases(BufReader::new(file))
}

pub fn write_cases<'a>(
    cases: impl IntoIterator<Item = &'a CaseRecord>,
    mut w: impl Write,
) -> std::io::Result<()> {
    for c in cases {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// A source multiple-choice or open QA record before transformation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawQaRecord {
    pub id: String,
    pub context: String,
    pub question: String,
    #[serde(default)]
    pub options: BTreeMap<String, String>,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub department: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub case_id: String,
    pub stage: String,
    pub template: String,
    pub judge: String,
    pub prompt: String,
    pub output: String,
}

/// Model outputs keyed by `(case_id, stage)`, optionally persisted as JSONL.
#[derive(Debug, Default)]
pub struct StageCache {
    path: Option<PathBuf>,
    records: Vec<StageRecord>,
    index: HashMap<(String, String), usize>,
}

impl StageCache {
    pub fn in_memory() -> Self {
        StageCache::default()
    }

    /// Loads prior records from `path` (if it exists) and appends new ones to it.
    pub fn open(path: &Path) -> Result<Self, CaseBankError> {
        let mut cache = StageCache {
            path: Some(path.to_path_buf()),
            ..Default::default()
        };
        if path.exists() {
            let raw = fs::read_to_string(path).map_err(io_err(path))?;
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: StageRecord = serde_json::from_str(line).map_err(|e| CaseBankError::SchemaError {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                cache.remember(rec);
            }
        }
        Ok(cache)
    }

    fn remember(&mut self, rec: StageRecord) {
        let key = (rec.case_id.clone(), rec.stage.clone());
        self.index.insert(key, self.records.len());
        self.records.push(rec);
    }

    pub fn get(&self, case_id: &str, stage: &str) -> Option<&StageRecord> {
        self.index
            .get(&(case_id.to_string(), stage.to_string()))
            .map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    /// Returns the cached output or calls the judge and records the result.
    /// Empty outputs are returned but not cached.
    pub fn run(
        &mut self,
        case_id: &str,
        stage: &str,
        template: &PromptTemplate,
        prompt: String,
        judge: &dyn JudgeClient,
    ) -> Result<String, CaseBankError> {
        if let Some(rec) = self.get(case_id, stage) {
            return Ok(rec.output.clone());
        }
        let output = judge.complete(&prompt)?.trim().to_string();
        if output.is_empty() {
            return Ok(output);
        }
        let rec = StageRecord {
            case_id: case_id.to_string(),
            stage: stage.to_string(),
            template: template.tag(),
            judge: judge.id().to_string(),
            prompt,
            output: output.clone(),
        };
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(io_err(path))?;
            let line = serde_json::to_string(&rec).expect("stage record serializes");
            writeln!(f, "{line}").map_err(io_err(path))?;
        }
        self.remember(rec);
        Ok(output)
    }
}

/// Parses `Label: content` lines into sections. Lines without a label extend
/// the previous section.
pub fn parse_sections(text: &str) -> Vec<Section> {
    let mut sections: Vec<Section> = Vec::new();
    for line in text.lines() {
        let line = line.trim().trim_start_matches(['-', '*', '•']).trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once(':') {
            Some((label, content)) if !label.trim().is_empty() && label.len() <= 60 && !content.trim().is_empty() => {
                sections.push(Section::new(label.trim(), content.trim()));
            }
            _ => match sections.last_mut() {
                Some(s) => {
                    s.content.push(' ');
                    s.content.push_str(line);
                }
                None => sections.push(Section::new("Findings", line)),
            },
        }
    }
    sections
}

fn require_output(case_id: &str, stage: &str, out: String) -> Result<String, CaseBankError> {
    if out.is_empty() {
        Err(CaseBankError::EmptyModelOutput {
            case_id: case_id.to_string(),
            stage: stage.to_string(),
        })
    } else {
        Ok(crate::text::collapse_whitespace(&out))
    }
}

/// Runs extraction, chief-complaint rewrite and question rephrase.
pub fn transform_case(
    raw: &RawQaRecord,
    judge: &dyn JudgeClient,
    cache: &mut StageCache,
) -> Result<CaseRecord, CaseBankError> {
    if raw.context.trim().is_empty() || raw.answer.trim().is_empty() {
        return Err(CaseBankError::Precondition(format!(
            "raw record {} needs context and answer",
            raw.id
        )));
    }
    let id = raw.id.as_str();
    let extraction = cache.run(
        id,
        "extract",
        &prompts::EXTRACT_CLINICAL_INFO,
        prompts::EXTRACT_CLINICAL_INFO.render(&[("context", &raw.context)]),
        judge,
    )?;
    let sections = parse_sections(&extraction);
    if sections.is_empty() {
        return Err(CaseBankError::ExtractionEmpty(raw.id.clone()));
    }
    let complaint = cache.run(
        id,
        "chief_complaint",
        &prompts::REWRITE_CHIEF_COMPLAINT,
        prompts::REWRITE_CHIEF_COMPLAINT.render(&[("context", &raw.context)]),
        judge,
    )?;
    let chief_complaint = require_output(id, "chief_complaint", complaint)?;
    let question = if raw.options.is_empty() {
        raw.question.trim().to_string()
    } else {
        let options = raw
            .options
            .iter()
            .map(|(k, v)| format!("{k}. {v}"))
            .collect::<Vec<_>>()
            .join("\n");
        let out = cache.run(
            id,
            "question",
            &prompts::REPHRASE_QUESTION,
            prompts::REPHRASE_QUESTION.render(&[("question", &raw.question), ("options", &options)]),
            judge,
        )?;
        require_output(id, "question", out)?
    };
    let record = CaseRecord {
        case_id: raw.id.clone(),
        question,
        chief_complaint,
        clinical_info: ClinicalInfoDoc::new(raw.id.clone(), sections),
        gold_answer: raw.answer.clone(),
        department: raw.department.clone(),
        task: raw.task.clone(),
    };
    record
        .validate()
        .map_err(|message| CaseBankError::SchemaError { line: 0, message })?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionResponsePair {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    pub instruction: String,
    pub response: Transcript,
}

impl InstructionResponsePair {
    pub fn new(case_id: Option<String>, response: Transcript) -> Self {
        InstructionResponsePair {
            case_id,
            instruction: response.instruction.clone(),
            response,
        }
    }
}

/// Converts the case into an initial response of numbered question/answer
/// pairs (no deep thinking yet) closed by a final diagnosis.
pub fn convert_to_initial_response(
    case: &CaseRecord,
    judge: &dyn JudgeClient,
    cache: &mut StageCache,
) -> Result<InstructionResponsePair, CaseBankError> {
    let instruction = case.instruction();
    let out = cache.run(
        &case.case_id,
        "stepwise",
        &prompts::STEPWISE_CONVERSION,
        prompts::STEPWISE_CONVERSION.render(&[
            ("instruction", &instruction),
            ("clinical_info", &case.clinical_info.render()),
            ("gold_answer", &case.gold_answer),
        ]),
        judge,
    )?;
    let invalid = |reason: String| CaseBankError::InvalidConversion {
        case_id: case.case_id.clone(),
        reason,
    };
    // Parse the model's steps on their own; its preamble is discarded.
    let body = match out.find("[Question]").or_else(|| out.find("[Deep Think]")) {
        Some(at) => &out[at..],
        None => return Err(invalid("no steps".into())),
    };
    let mut response = parse_transcript(body).map_err(|e| invalid(e.to_string()))?;
    response.instruction = instruction;
    for s in &mut response.steps {
        s.deep_think.clear();
    }
    if response.steps.is_empty() || response.final_diagnosis.is_none() {
        return Err(invalid("needs at least one step and a final diagnosis".into()));
    }
    response.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(InstructionResponsePair::new(Some(case.case_id.clone()), response))
}

fn ngrams(tokens: &[String], n: usize) -> HashSet<&[String]> {
    if tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).collect()
}

/// First step whose deep thinking repeats, verbatim, a run of at least
/// [`LEAKAGE_SPAN_TOKENS`] tokens from the answer of any later step.
pub fn find_leakage(t: &Transcript) -> Option<usize> {
    let answers: Vec<Vec<String>> = t
        .steps
        .iter()
        .map(|s| alnum_tokens(s.answer.as_deref().unwrap_or("")))
        .collect();
    for (i, step) in t.steps.iter().enumerate() {
        let think = alnum_tokens(&step.deep_think);
        let grams = ngrams(&think, LEAKAGE_SPAN_TOKENS);
        if grams.is_empty() {
            continue;
        }
        for later in &answers[i + 1..] {
            if later.windows(LEAKAGE_SPAN_TOKENS).any(|w| grams.contains(w)) {
                return Some(step.index);
            }
        }
    }
    None
}

/// Fills every step's deep thinking, one model call per step. The model sees
/// only the steps before the one it is reasoning about.
pub fn inject_deep_thinking(
    pair: &InstructionResponsePair,
    judge: &dyn JudgeClient,
    cache: &mut StageCache,
) -> Result<InstructionResponsePair, CaseBankError> {
    let t = &pair.response;
    if let Some(s) = t.steps.iter().find(|s| !s.deep_think.is_empty()) {
        return Err(CaseBankError::Precondition(format!("step {} already has deep thinking", s.index)));
    }
    if let Some(s) = t.steps.iter().find(|s| !s.is_completed()) {
        return Err(CaseBankError::Precondition(format!("step {} has no answer", s.index)));
    }
    let key = pair.case_id.clone().unwrap_or_else(|| pair.instruction.clone());
    let mut out = t.clone();
    for i in 0..t.steps.len() {
        let step = &t.steps[i];
        let history = t.steps[..i]
            .iter()
            .map(|s| {
                format!(
                    "[Question] {} <{}>: {}\n[Answer] {}: {}",
                    s.index,
                    s.responder,
                    s.question,
                    s.index,
                    s.answer.as_deref().unwrap_or("")
                )
            })
            .collect::<Vec<_>>()
            .join("\n");
        let step_no = step.index.to_string();
        let prompt = prompts::DEEP_THINKING.render(&[
            ("step", &step_no),
            ("instruction", &t.instruction),
            ("steps", if history.is_empty() { "(none)" } else { &history }),
            ("question", &step.question),
        ]);
        let stage = format!("deep_think:{}", step.index);
        let thought = cache.run(&key, &stage, &prompts::DEEP_THINKING, prompt, judge)?;
        if thought.is_empty() {
            return Err(CaseBankError::InvalidDeepThink {
                step: step.index,
                reason: "empty output".into(),
            });
        }
        crate::protocol::check_field("deep_think", &thought).map_err(|e| CaseBankError::InvalidDeepThink {
            step: step.index,
            reason: e.to_string(),
        })?;
        out.steps[i].deep_think = thought;
    }
    if let Some(step) = find_leakage(&out) {
        return Err(CaseBankError::LeakageDetected(step));
    }
    Ok(InstructionResponsePair::new(pair.case_id.clone(), out))
}
