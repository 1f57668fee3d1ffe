//! Per-step reference attachment for a finished transcript.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EmbeddingPort, FlatIndex, RetrievalError};
use crate::engine::SessionTrace;
use crate::protocol::{Reference, Responder, Transcript};
use crate::text::collapse_whitespace;

/// What the physician did at each `<Physician>` step, keyed by step index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicianLog {
    pub entries: BTreeMap<usize, String>,
}

impl PhysicianLog {
    pub fn insert(&mut self, step: usize, action: impl Into<String>) {
        self.entries.insert(step, action.into());
    }

    /// One entry per assistant call in the trace.
    pub fn from_trace(trace: &SessionTrace) -> PhysicianLog {
        let mut log = PhysicianLog::default();
        for (step, call) in trace.assistant_calls() {
            log.insert(step, format!("Physician: {}. Result: {}", call.request.trim_end_matches('.'), call.answer));
        }
        log
    }

    /// Reconstructs the log from the transcript's own physician answers.
    pub fn from_transcript(t: &Transcript) -> PhysicianLog {
        let mut log = PhysicianLog::default();
        for s in t.steps.iter().filter(|s| s.responder == Responder::Physician) {
            if let Some(a) = &s.answer {
                log.insert(s.index, format!("Physician: {}. Result: {}", s.question.trim_end_matches('.'), a));
            }
        }
        log
    }
}

/// `<LLM>` steps cite the top-1 paragraph for their question; `<Physician>`
/// steps cite the logged physician action.
pub fn attach_references(
    t: &Transcript,
    index: &FlatIndex,
    embedder: &dyn EmbeddingPort,
    log: &PhysicianLog,
) -> Result<Transcript, RetrievalError> {
    if t.final_diagnosis.is_none() {
        return Err(RetrievalError::MissingFinal);
    }
    let needs_index = t.steps.iter().any(|s| s.responder == Responder::Llm);
    if needs_index && index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let mut references = Vec::with_capacity(t.steps.len());
    for s in &t.steps {
        let citation = match s.responder {
            Responder::Llm => {
                let hit = index.search_vector(&embedder.embed(&s.question)?, 1)?.remove(0);
                let i = index.find(&hit.doc_id).expect("hit comes from the index");
                let p = index.paragraph(i);
                format!("{} {}: {}", p.source, p.doc_id, p.text)
            }
            Responder::Physician => log
                .entries
                .get(&s.index)
                .cloned()
                .ok_or(RetrievalError::MissingPhysicianLog(s.index))?,
        };
        references.push(Reference {
            step: s.index,
            citation: collapse_whitespace(&citation),
        });
    }
    let mut out = t.clone();
    out.references = references;
    out.validate()?;
    Ok(out)
}
