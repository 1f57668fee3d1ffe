//! Simulated physician assistant answering clinical-operation requests from a
//! case's detailed clinical information.
//!
//! Lexical mode scores each section by the share of request tokens it covers
//! and returns the best section's content, or [`NOT_MENTIONED`] when no section
//! reaches [`OVERLAP_THRESHOLD`]. Before scoring, common clinical phrases are
//! folded to their abbreviation ("blood pressure" becomes `bp`) and section
//! labels contribute the abbreviations of the category they name, so a
//! "Vitals" section answers a blood-pressure request.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{AssistantContext, AssistantError, AssistantPort};
use crate::llm::{JudgeClient, ModelError};
use crate::prompts;
use crate::text::{alnum_tokens, is_stopword};

pub const NOT_MENTIONED: &str = "Not mentioned";
pub const OVERLAP_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub label: String,
    pub content: String,
}

impl Section {
    pub fn new(label: impl Into<String>, content: impl Into<String>) -> Self {
        Section {
            label: label.into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalInfoDoc {
    #[serde(default)]
    pub case_id: String,
    pub sections: Vec<Section>,
}

impl ClinicalInfoDoc {
    pub fn new(case_id: impl Into<String>, sections: Vec<Section>) -> Self {
        ClinicalInfoDoc {
            case_id: case_id.into(),
            sections,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.sections.is_empty() {
            return Err("clinical_info needs at least one section".into());
        }
        if let Some(i) = self
            .sections
            .iter()
            .position(|s| s.label.trim().is_empty() && s.content.trim().is_empty())
        {
            return Err(format!("clinical_info section {i} is empty"));
        }
        Ok(())
    }

    /// `Label: content`, one section per line.
    pub fn render(&self) -> String {
        self.sections
            .iter()
            .map(|s| format!("{}: {}", s.label, s.content))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(#[from] ModelError),
    #[error("clinical information document is empty")]
    EmptyDocument,
}

const PHRASES: &[(&str, &str)] = &[
    ("blood pressure", "bp"),
    ("heart rate", "hr"),
    ("pulse rate", "hr"),
    ("respiratory rate", "rr"),
    ("oxygen saturation", "spo2"),
    ("white blood cell count", "wbc"),
    ("white blood cells", "wbc"),
    ("white blood cell", "wbc"),
    ("complete blood count", "cbc"),
    ("magnetic resonance imaging", "mri"),
    ("computed tomography", "ct"),
    ("ct scan", "ct"),
    ("electrocardiogram", "ecg"),
    ("ekg", "ecg"),
    ("x ray", "xray"),
    ("x-ray", "xray"),
    ("temperature", "temp"),
    ("body temperature", "temp"),
];

/// Abbreviations implied by a section label naming a category.
const CATEGORIES: &[(&[&str], &[&str])] = &[
    (&["vital", "vitals"], &["bp", "hr", "rr", "temp", "spo2", "pulse"]),
    (
        &["imaging", "radiology"],
        &["mri", "ct", "xray", "ultrasound", "radiograph", "scan"],
    ),
    (
        &["lab", "labs", "laboratory"],
        &["lab", "laboratory", "test", "blood", "cbc", "wbc", "serum", "level"],
    ),
];

fn stem(token: &str) -> String {
    if token.len() > 3 && token.ends_with('s') && !token.ends_with("ss") {
        token[..token.len() - 1].to_string()
    } else {
        token.to_string()
    }
}

fn fold_phrases(text: &str) -> String {
    let mut lowered = format!(" {} ", alnum_tokens(text).join(" "));
    for (phrase, abbr) in PHRASES {
        let phrase = format!(" {} ", alnum_tokens(phrase).join(" "));
        lowered = lowered.replace(&phrase, &format!(" {abbr} "));
    }
    lowered
}

fn lexical_tokens(text: &str) -> BTreeSet<String> {
    fold_phrases(text)
        .split_whitespace()
        .filter(|t| !is_stopword(t))
        .map(stem)
        .collect()
}

fn section_tokens(section: &Section) -> BTreeSet<String> {
    let mut tokens = lexical_tokens(&format!("{} {}", section.label, section.content));
    let label = lexical_tokens(&section.label);
    for (names, implied) in CATEGORIES {
        if names.iter().any(|n| label.contains(&stem(n))) {
            tokens.extend(implied.iter().map(|t| stem(t)));
        }
    }
    tokens
}

/// Fraction of (non-stopword) request tokens present in the section.
pub fn lexical_overlap(request: &str, section: &Section) -> f64 {
    let req = lexical_tokens(request);
    if req.is_empty() {
        return 0.0;
    }
    let sec = section_tokens(section);
    req.intersection(&sec).count() as f64 / req.len() as f64
}

/// Best section by overlap; ties go to the lowest index.
pub fn best_section(request: &str, doc: &ClinicalInfoDoc) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in doc.sections.iter().enumerate() {
        let score = lexical_overlap(request, s);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    best
}

#[derive(Clone)]
pub enum OracleMode {
    Lexical,
    Model(Arc<dyn JudgeClient>),
}

impl std::fmt::Debug for OracleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OracleMode::Lexical => f.write_str("Lexical"),
            OracleMode::Model(j) => write!(f, "Model({})", j.id()),
        }
    }
}

pub fn fulfill_request(
    request: &str,
    doc: &ClinicalInfoDoc,
    mode: &OracleMode,
) -> Result<String, OracleError> {
    if doc.sections.is_empty() {
        return Err(OracleError::EmptyDocument);
    }
    match mode {
        OracleMode::Lexical => Ok(match best_section(request, doc) {
            Some((i, score)) if score >= OVERLAP_THRESHOLD => doc.sections[i].content.clone(),
            _ => NOT_MENTIONED.to_string(),
        }),
        OracleMode::Model(judge) => {
            let prompt = prompts::ORACLE_EXTRACTION.render(&[
                ("request", request),
                ("clinical_info", &doc.render()),
            ]);
            let reply = judge.complete(&prompt)?;
            let reply = reply.trim();
            Ok(if reply.is_empty() {
                NOT_MENTIONED.to_string()
            } else {
                reply.to_string()
            })
        }
    }
}

/// The simulated assistant: looks up the case's document and answers from it.
pub struct ClinicalOracle {
    mode: OracleMode,
    docs: HashMap<String, ClinicalInfoDoc>,
}

impl ClinicalOracle {
    pub fn new(mode: OracleMode) -> Self {
        ClinicalOracle {
            mode,
            docs: HashMap::new(),
        }
    }

    pub fn with_docs(mode: OracleMode, docs: impl IntoIterator<Item = ClinicalInfoDoc>) -> Self {
        let mut oracle = ClinicalOracle::new(mode);
        for d in docs {
            oracle.insert(d);
        }
        oracle
    }

    pub fn insert(&mut self, doc: ClinicalInfoDoc) {
        self.docs.insert(doc.case_id.clone(), doc);
    }
}

impl AssistantPort for ClinicalOracle {
    fn fulfill(&self, request: &str, ctx: &AssistantContext<'_>) -> Result<String, AssistantError> {
        let doc = self
            .docs
            .get(ctx.case_id)
            .ok_or_else(|| AssistantError::Unavailable(format!("no clinical information for case {}", ctx.case_id)))?;
        fulfill_request(request, doc, &self.mode).map_err(|e| AssistantError::Unavailable(e.to_string()))
    }
}
