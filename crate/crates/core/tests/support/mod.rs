//! Generators shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clinflow_core::casebank::InstructionResponsePair;
use clinflow_core::oracle::{ClinicalInfoDoc, Section};
use clinflow_core::protocol::{FinalDiagnosis, Reference, Responder, Step, Transcript};
use clinflow_core::retrieval::{IndexedParagraph, Paragraph, Source};

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden")
}

/// Every golden transcript, sorted by file name.
pub fn golden_corpus() -> Vec<(String, String)> {
    let mut files: Vec<_> = std::fs::read_dir(golden_dir())
        .expect("golden corpus present")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read_to_string(&p).unwrap())
        })
        .collect()
}

const WORDS: &[&str] = &[
    "pain", "fever", "BP", "128/79", "lipase", "1200", "U/L", "ECG", "ST-elevation", "°C", "µg/L", "≥20",
    "Crohn’s", "naïve", "x-ray", "(normal)", "(2)", "#3", "a:b", "—", "patient", "reports", "since", "night",
    "mmHg", "café", "β-blocker", "?", "!", "50%", "tender", "right", "lower", "quadrant",
];

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(WORDS).prop_map(str::to_string)
}

/// A trimmed line that never reads as a marker.
pub fn line() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..7).prop_map(|w| {
        let l = w.join(" ");
        if l.starts_with('[') && l[1..].starts_with(|c: char| c.is_alphabetic()) {
            format!("x {l}")
        } else {
            l
        }
    })
}

/// One to three lines, sometimes with an inner blank line.
pub fn content() -> impl Strategy<Value = String> {
    (prop::collection::vec(line(), 1..4), any::<bool>()).prop_map(|(lines, blank)| {
        if blank && lines.len() > 1 {
            format!("{}\n\n{}", lines[0], lines[1..].join("\n"))
        } else {
            lines.join("\n")
        }
    })
}

fn responder() -> impl Strategy<Value = Responder> {
    prop_oneof![Just(Responder::Llm), Just(Responder::Physician)]
}

fn raw_step() -> impl Strategy<Value = (Option<String>, String, Responder, String)> {
    (prop::option::weighted(0.8, content()), content(), responder(), content())
}

fn final_body(n_steps: usize) -> impl Strategy<Value = String> {
    let refs = if n_steps == 0 {
        Just(Vec::new()).boxed()
    } else {
        prop::collection::vec(1..=n_steps, 0..4).boxed()
    };
    (content(), refs, line()).prop_map(|(text, refs, answer)| {
        let refs: String = refs.iter().map(|k| format!(" [{k}]")).collect();
        format!("{text}{refs}\nSo the final answer is {answer}.")
    })
}

/// Any transcript the emitter accepts: drafts, sessions in progress and
/// finished transcripts with or without references.
pub fn transcript() -> impl Strategy<Value = Transcript> {
    (
        prop::option::weighted(0.9, content()),
        prop::collection::vec(raw_step(), 0..7),
        any::<bool>(),
        any::<bool>(),
    )
        .prop_flat_map(|(instruction, raw, finished, open_last)| {
            let n = raw.len();
            let body = if finished { final_body(n).prop_map(Some).boxed() } else { Just(None).boxed() };
            let refs = prop::collection::vec((any::<bool>(), line()), n..=n);
            (Just(instruction), Just(raw), body, refs, Just(open_last))
        })
        .prop_map(|(instruction, raw, body, refs, open_last)| {
            let mut t = Transcript::new(instruction.unwrap_or_default());
            let n = raw.len();
            for (i, (think, question, responder, answer)) in raw.into_iter().enumerate() {
                let open = body.is_none() && open_last && i + 1 == n;
                t.steps.push(Step {
                    index: i + 1,
                    deep_think: think.unwrap_or_default(),
                    question,
                    responder,
                    answer: (!open).then_some(answer),
                });
            }
            if let Some(b) = body {
                t.final_diagnosis = Some(FinalDiagnosis::new(b).unwrap());
                t.references = refs
                    .into_iter()
                    .enumerate()
                    .filter(|(_, (keep, _))| *keep)
                    .map(|(i, (_, citation))| Reference { step: i + 1, citation })
                    .collect();
            }
            t
        })
}

/// A finished transcript with every field populated, as training data needs.
pub fn full_transcript() -> impl Strategy<Value = Transcript> {
    (content(), prop::collection::vec((content(), content(), responder(), content()), 1..7))
        .prop_flat_map(|(instruction, raw)| {
            let n = raw.len();
            (Just(instruction), Just(raw), final_body(n))
        })
        .prop_map(|(instruction, raw, body)| {
            let mut t = Transcript::new(instruction);
            for (i, (think, question, responder, answer)) in raw.into_iter().enumerate() {
                t.steps.push(Step {
                    index: i + 1,
                    deep_think: think,
                    question,
                    responder,
                    answer: Some(answer),
                });
            }
            t.final_diagnosis = Some(FinalDiagnosis::new(body).unwrap());
            t
        })
}

pub fn pair_for(t: &Transcript) -> InstructionResponsePair {
    InstructionResponsePair::new(Some("gen".into()), t.clone())
}

pub fn clinical_doc() -> ClinicalInfoDoc {
    ClinicalInfoDoc::new(
        "gen",
        vec![
            Section::new("Vitals", "BP 128/79, HR 84, temperature 38.4 °C"),
            Section::new("Labs", "Serum lipase 1200 U/L"),
        ],
    )
}

/// A random corpus of `n` unit-free vectors. With `ties`, vectors are drawn
/// from a small pool so equal scores are common.
pub fn random_corpus(rng: &mut ChaCha8Rng, n: usize, d: usize, ties: bool) -> Vec<IndexedParagraph> {
    let pool: Vec<Vec<f32>> = (0..4).map(|_| random_vector(rng, d, ties)).collect();
    (0..n)
        .map(|i| {
            let vector = if ties && rng.random_bool(0.7) {
                pool[rng.random_range(0..pool.len())].clone()
            } else {
                random_vector(rng, d, ties)
            };
            IndexedParagraph {
                paragraph: Paragraph {
                    doc_id: format!("d{:05}", (i * 7919) % 100_000),
                    source: Source::PubMed,
                    text: format!("paragraph {i}"),
                },
                vector,
            }
        })
        .collect()
}

/// Small integers when `coarse`, so dot products are exact and ties likely.
pub fn random_vector(rng: &mut ChaCha8Rng, d: usize, coarse: bool) -> Vec<f32> {
    (0..d)
        .map(|_| {
            if coarse {
                rng.random_range(-2i32..=2) as f32
            } else {
                rng.random_range(-1.0f32..1.0)
            }
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Full-scan reference ranking: score descending, doc_id ascending.
pub fn brute_force_topk(corpus: &[IndexedParagraph], query: &[f32], k: usize) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = corpus
        .iter()
        .map(|e| {
            let s: f64 = e.vector.iter().zip(query).map(|(&a, &b)| a as f64 * b as f64).sum();
            (e.paragraph.doc_id.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}
