//! Loss-mask spans for decoupled instruction tuning.
//!
//! Reasoning samples train on deep-think and question content; knowledge
//! samples train on answer and final-diagnosis content and carry the case's
//! clinical information right after the instruction. Marker headers, step
//! numbers and separators belong to neither mask. Spans are half-open
//! character (Unicode scalar) offsets into `full_text`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casebank::InstructionResponsePair;
use crate::oracle::ClinicalInfoDoc;
use crate::protocol::{emit_with_layout, FieldKind, FieldSpan, ProtocolError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("mask selects no positions")]
    EmptyMask,
    #[error("span {start}..{end} exceeds sequence length {len}")]
    SpanOutOfRange { start: usize, end: usize, len: usize },
    #[error("log-probability at position {0} is not a finite value <= 0")]
    InvalidLogProb(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Reasoning,
    Knowledge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSample {
    pub full_text: String,
    pub spans: Vec<[usize; 2]>,
    pub mode: MaskMode,
}

impl MaskedSample {
    /// The characters each span covers, concatenated in order.
    pub fn masked_text(&self) -> Vec<String> {
        let chars: Vec<char> = self.full_text.chars().collect();
        self.spans
            .iter()
            .map(|[s, e]| chars[*s..*e].iter().collect())
            .collect()
    }
}

pub(crate) fn clinical_info_block(doc: &ClinicalInfoDoc) -> String {
    format!("Patient clinical information:\n{}", doc.render())
}

fn in_mode(kind: FieldKind, mode: MaskMode) -> bool {
    match mode {
        MaskMode::Reasoning => matches!(kind, FieldKind::DeepThink | FieldKind::Question),
        MaskMode::Knowledge => matches!(kind, FieldKind::Answer | FieldKind::Final),
    }
}

fn byte_to_char_offsets(text: &str) -> Vec<usize> {
    // map[b] = number of chars before byte b, for every char boundary b.
    let mut map = vec![0; text.len() + 1];
    let mut count = 0;
    for (b, _) in text.char_indices() {
        map[b] = count;
        count += 1;
    }
    map[text.len()] = count;
    map
}

pub fn build_masks(
    pair: &InstructionResponsePair,
    clinical_info: &ClinicalInfoDoc,
    mode: MaskMode,
) -> Result<MaskedSample, MaskError> {
    let t = &pair.response;
    if pair.instruction != t.instruction {
        return Err(MaskError::InvariantViolation(
            "pair instruction differs from response instruction".into(),
        ));
    }
    if let Some(s) = t.steps.iter().find(|s| s.deep_think.is_empty() || !s.is_completed()) {
        return Err(MaskError::InvariantViolation(format!("step {} is not fully populated", s.index)));
    }
    if t.final_diagnosis.is_none() {
        return Err(MaskError::InvariantViolation("response has no final diagnosis".into()));
    }
    let (mut text, layout) = emit_with_layout(t)?;
    let mut shift = 0;
    if mode == MaskMode::Knowledge {
        let insert_at = t.instruction.len();
        let block = if insert_at == 0 {
            format!("{}\n\n", clinical_info_block(clinical_info))
        } else {
            format!("\n\n{}", clinical_info_block(clinical_info))
        };
        shift = block.len();
        text.insert_str(insert_at, &block);
    }
    let map = byte_to_char_offsets(&text);
    let spans = layout
        .iter()
        .filter(|f| in_mode(f.kind, mode) && !f.range.is_empty())
        .map(|f: &FieldSpan| [map[f.range.start + shift], map[f.range.end + shift]])
        .collect();
    Ok(MaskedSample {
        full_text: text,
        spans,
        mode,
    })
}

/// Reasoning then knowledge sample for each pair, so batches can alternate.
pub fn alternating_samples<'a>(
    pairs: impl IntoIterator<Item = (&'a InstructionResponsePair, &'a ClinicalInfoDoc)>,
) -> Result<Vec<MaskedSample>, MaskError> {
    let mut out = Vec::new();
    for (pair, doc) in pairs {
        out.push(build_masks(pair, doc, MaskMode::Reasoning)?);
        out.push(build_masks(pair, doc, MaskMode::Knowledge)?);
    }
    Ok(out)
}

pub fn write_samples(samples: &[MaskedSample], mut w: impl Write) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Whitespace tokenization with the mask projected onto token positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenProjection {
    /// Character range of each token.
    pub tokens: Vec<[usize; 2]>,
    /// Half-open token-index ranges selected by the mask.
    pub spans: Vec<[usize; 2]>,
}

/// Reference projection: a token is masked in when it overlaps any span.
pub fn project_whitespace(sample: &MaskedSample) -> TokenProjection {
    let mut tokens = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, c) in sample.full_text.chars().enumerate() {
        n = i + 1;
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                tokens.push([s, i]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push([s, n]);
    }
    let flagged: Vec<bool> = tokens
        .iter()
        .map(|[ts, te]| sample.spans.iter().any(|[s, e]| ts < e && s < te))
        .collect();
    let mut spans = Vec::new();
    let mut run: Option<usize> = None;
    for (i, &f) in flagged.iter().enumerate() {
        match (f, run) {
            (true, None) => run = Some(i),
            (false, Some(s)) => {
                spans.push([s, i]);
                run = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run {
        spans.push([s, flagged.len()]);
    }
    TokenProjection { tokens, spans }
}

/// Negative log-likelihood summed over masked positions. Overlapping spans
/// count each position once.
pub fn masked_nll(token_logprobs: &[f64], token_spans: &[[usize; 2]]) -> Result<f64, MaskError> {
    let len = token_logprobs.len();
    let mut selected = vec![false; len];
    for &[start, end] in token_spans {
        if start > end || end > len {
            return Err(MaskError::SpanOutOfRange { start, end, len });
        }
        selected[start..end].iter_mut().for_each(|s| *s = true);
    }
    let mut total = 0.0;
    let mut any = false;
    for (i, (&lp, &sel)) in token_logprobs.iter().zip(&selected).enumerate() {
        if !sel {
            continue;
        }
        if !(lp.is_finite() && lp <= 0.0) {
            return Err(MaskError::InvalidLogProb(i));
        }
        total -= lp;
        any = true;
    }
    if !any {
        return Err(MaskError::EmptyMask);
    }
    Ok(total)
}
